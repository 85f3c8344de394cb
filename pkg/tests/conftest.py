import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from trafficbench.classifiers import TrainConfig, train_neural
from trafficbench.flowdata import SplitSpec, SyntheticSpec, class_means, generate_synthetic, split
from trafficbench.preprocess import apply_scaler, fit_scaler

sys.path.insert(0, str(Path(__file__).parent))

np.seterr(all="warn", under="ignore")
hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")

# Two unit-variance Gaussians that differ by 0.4 on each of 128 features.
# After z-scoring, the per-feature class offset (~0.196) is below an L-inf
# budget of 0.3, while the features together still give ~99% Bayes accuracy.
ATTACK_SPEC = SyntheticSpec(n_per_class=1000, n_classes=2, n_informative=128, n_noise=0,
                            class_separation=0.4, seed=1)


@pytest.fixture(scope="session")
def attack_case():
    """Scaled train/test split of ATTACK_SPEC plus an mlp trained at the default config."""
    ds = generate_synthetic(ATTACK_SPEC)
    train, test = split(ds, SplitSpec(0.8, 0, True))
    scaler = fit_scaler(train)
    train, test = apply_scaler(train, scaler), apply_scaler(test, scaler)
    model = train_neural(train, "mlp", TrainConfig(seed=0))
    direction = np.diff(class_means(ATTACK_SPEC), axis=0)[0] / scaler.std
    return {"train": train, "test": test, "model": model, "direction": direction}
