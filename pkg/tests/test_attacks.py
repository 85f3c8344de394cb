import json

import numpy as np
import pytest

from oracles import best_threshold_accuracy, hyperplane_distance
from probes import QueryOnly
from trafficbench.attacks import (
    DEEPFOOL_KICK,
    AttackResult,
    DeepFoolConfig,
    PgdConfig,
    ZooConfig,
    attack_deepfool,
    attack_pgd,
    attack_zoo,
    central_difference,
    deepfool_step,
    margin_loss,
    run_attack,
    train_surrogate,
)
from trafficbench.classifiers import NeuralModel, NotDifferentiableError, TrainConfig, train_knn, train_tree
from trafficbench.flowdata import Dataset, FeatureSchema, SyntheticSpec, generate_synthetic


def make(X, y, classes=2):
    X = np.asarray(X, dtype=float)
    schema = FeatureSchema([f"f{i}" for i in range(X.shape[1])],
                           ["numeric-rate"] * X.shape[1], [f"c{i}" for i in range(classes)])
    return Dataset(X, np.asarray(y), schema)


def linear(W, b):
    W, b = np.asarray(W, dtype=float), np.asarray(b, dtype=float)
    return NeuralModel("mlp", W.shape[0], W.shape[1], hidden=(), params={"out.W": W, "out.b": b})


@pytest.fixture(scope="module")
def small(attack_case):
    test = attack_case["test"]
    return attack_case["model"], test.subset(np.arange(60))


# -- PGD --------------------------------------------------------------------

def test_pgd_zero_budget_is_identity(small):
    model, data = small
    res = attack_pgd(model, data, PgdConfig(epsilon=0.0, alpha=0.05))
    assert np.array_equal(res.adversarial, data.features)
    assert not res.success.any()


def test_pgd_one_step_on_logistic_fixture():
    # two-class linear model on one feature: d loss / dx for label 0 is
    # -p1 * (w0 - w1), so a single step moves by -alpha * sign(w0 - w1)
    W = np.array([[1.5, -0.5]])
    model = linear(W, [0.2, 0.0])
    data = make([[0.3], [-2.0]], [0, 0])
    res = attack_pgd(model, data, PgdConfig(1.0, 0.1, 1, random_start=False))
    expect = -0.1 * np.sign(W[0, 0] - W[0, 1])
    assert np.array_equal(res.adversarial, data.features + expect)


def test_pgd_respects_budget_and_breaks_margin_data(attack_case):
    model, test = attack_case["model"], attack_case["test"]
    # the data is (almost) separable along the class-mean direction
    proj = test.features @ attack_case["direction"]
    assert best_threshold_accuracy(proj, test.labels) >= 0.95
    clean = np.mean(model.predict(test.features) == test.labels)
    assert clean >= 0.95
    cfg = PgdConfig()
    res = attack_pgd(model, test, cfg)
    assert np.all(res.linf_norms <= cfg.epsilon + 1e-9)
    assert np.mean(res.adv_pred == test.labels) < 0.20


def test_pgd_success_non_decreasing_in_epsilon(small):
    model, data = small
    rates = [attack_pgd(model, data, PgdConfig(eps, min(0.05, eps), 40, seed=3)).success_rate()
             for eps in (0.05, 0.1, 0.3)]
    assert rates == sorted(rates)


def test_pgd_rejects_non_differentiable():
    ds = generate_synthetic(SyntheticSpec(10, 2, 1, 0, 3.0, 0))
    with pytest.raises(NotDifferentiableError, match="surrogate"):
        attack_pgd(train_tree(ds), ds)


def test_pgd_config_validation():
    with pytest.raises(ValueError):
        PgdConfig(epsilon=0.1, alpha=0.2)
    with pytest.raises(ValueError):
        PgdConfig(iterations=0)


# -- DeepFool ---------------------------------------------------------------

def test_deepfool_linear_fixture_matches_hyperplane_distance():
    # |f'| = 1000 so the 1e-4 kick is a 1e-7 relative effect
    w = np.array([3.0, -4.0, 12.0])
    W = np.column_stack([np.zeros(3), w])
    model = linear(W, [1000.0, 0.0])
    x = np.zeros((1, 3))
    cfg = DeepFoolConfig(max_iterations=50, overshoot=0.02)
    res = attack_deepfool(model, make(x, [0]), cfg)
    expected = (1 + cfg.overshoot) * hyperplane_distance(w, -1000.0, x[0])
    assert res.success[0]
    assert res.metadata["iterations_used"] == [1]
    assert abs(res.l2_norms[0] - expected) / expected < 1e-6


def test_deepfool_step_on_boundary_is_only_the_kick():
    w = np.array([1.0, 2.0])
    f = np.array([[0.5, 0.5]])
    J = np.stack([np.zeros(2), w])[None]
    r, degenerate = deepfool_step(f, J, np.array([0]))
    assert not degenerate[0]
    assert np.linalg.norm(r) <= DEEPFOOL_KICK / np.linalg.norm(w) + 1e-18
    model = linear(np.column_stack([np.zeros(2), w]), [0.0, 0.0])
    res = attack_deepfool(model, make([[0.0, 0.0]], [0]), DeepFoolConfig(overshoot=0.02))
    assert res.l2_norms[0] <= 1.02 * DEEPFOOL_KICK / np.linalg.norm(w) * (1 + 1e-9)


def test_deepfool_degenerate_gradient_marked_unsuccessful():
    model = linear(np.zeros((2, 2)), [1.0, 0.0])
    res = attack_deepfool(model, make([[0.0, 0.0]], [0]))
    assert res.metadata["degenerate"] == 1
    assert not res.success[0]
    assert np.array_equal(res.adversarial, [[0.0, 0.0]])


def test_deepfool_flips_trained_mlp(attack_case):
    model, test = attack_case["model"], attack_case["test"]
    res = attack_deepfool(model, test, DeepFoolConfig())
    correct = model.predict(test.features) == test.labels
    assert res.success_rate(correct) >= 0.99
    # re-verify every claimed success independently
    clean = np.argmax(model.predict_proba(test.features), axis=1)
    adv = np.argmax(model.predict_proba(res.adversarial), axis=1)
    assert np.all(adv[res.success] != clean[res.success])


# -- ZOO --------------------------------------------------------------------

def test_central_difference_exact_on_quadratic():
    assert abs(central_difference(lambda x: x * x, 3.0, 0.01) - 6.0) < 1e-10


def test_margin_loss_values():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
    out = margin_loss(p, np.array([0, 0]), 0.0)
    assert out[0] == pytest.approx(np.log(0.7 / 0.2), abs=1e-12)
    assert out[1] == 0.0  # clipped at -kappa
    assert margin_loss(p, np.array([0, 0]), 1.0)[1] == -1.0
    assert margin_loss(p, np.array([0, 0]), 3.0)[1] == pytest.approx(np.log(0.1 / 0.8), abs=1e-12)


def test_zoo_uses_queries_only(small):
    model, data = small
    wrapped = QueryOnly(model)
    res = attack_zoo(wrapped, data.subset(np.arange(10)), ZooConfig(iterations=20))
    assert wrapped.gradient_calls == 0
    assert wrapped.proba_calls > 0
    assert res.queries.max() > 0


def test_zoo_query_accounting(small):
    model, data = small
    res = attack_zoo(model, data.subset(np.arange(10)), ZooConfig(iterations=10, coords_per_iter=2))
    assert np.all(res.queries <= 10 * (2 * 2 + 1))
    assert np.all(res.queries % 5 == 0)


def test_zoo_attacks_tree_directly():
    # piecewise-constant model: the estimate is zero almost everywhere, the
    # attack must still run and simply report failures
    ds = generate_synthetic(SyntheticSpec(20, 2, 2, 0, 3.0, 0))
    res = attack_zoo(train_tree(ds), ds, ZooConfig(iterations=5))
    assert res.success.dtype == bool
    assert np.all(res.queries[~res.success] == 5 * 3)


def test_zoo_epsilon_caps_perturbation(small):
    model, data = small
    res = attack_zoo(model, data.subset(np.arange(10)), ZooConfig(step_size=1.0, iterations=50, epsilon=0.1))
    assert np.all(res.linf_norms <= 0.1 + 1e-12)


# -- surrogate pathway ------------------------------------------------------

def test_self_distillation_agrees():
    ds = generate_synthetic(SyntheticSpec(150, 2, 2, 1, 3.0, 2))
    target = NeuralModel("mlp", ds.n_features, 2).init_params(5)
    from trafficbench.classifiers.neural import sgd_fit
    sgd_fit(target, ds.features, ds.labels, TrainConfig(seed=5))
    sur = train_surrogate(target, ds, TrainConfig(seed=5))
    assert sur.agreement >= 0.99
    assert sur.warnings == []


def test_depth_one_tree_surrogate():
    ds = generate_synthetic(SyntheticSpec(200, 2, 1, 0, 6.0, 1))
    tree = train_tree(ds)
    assert np.mean(tree.predict(ds.features) == ds.labels) >= 0.99
    assert tree.depth() == 1
    sur = train_surrogate(tree, ds, TrainConfig(seed=0))
    assert sur.agreement >= 0.95


def test_knn_xor_surrogate_hard_case():
    X = np.array([[-1, -1], [1, 1], [-1, 1], [1, -1]], dtype=float)
    ds = make(X, [0, 0, 1, 1])
    knn = train_knn(ds, 1)
    sur = train_surrogate(knn, ds, TrainConfig(seed=0))
    g = np.linspace(-2, 2, 21)
    Q = np.vstack([X, np.array([[a, b] for a in g for b in g])])
    agreement = np.mean(sur.predict(Q) == knn.predict(Q))
    print(f"knn(k=1) XOR surrogate agreement on points+grid: {agreement:.3f}")
    assert agreement >= 0.75


def test_low_agreement_surrogate_warns():
    ds = make([[-1, -1], [1, 1], [-1, 1], [1, -1]], [0, 0, 1, 1])
    sur = train_surrogate(train_knn(ds, 1), ds, TrainConfig(epochs=0, seed=1))
    if sur.agreement < 0.6:
        assert sur.warnings and "agrees" in sur.warnings[0]
    else:
        assert sur.warnings == []


def test_transfer_attack_scored_on_original_target():
    ds = generate_synthetic(SyntheticSpec(60, 2, 2, 0, 3.0, 4))
    tree = train_tree(ds)
    sur = train_surrogate(tree, ds, TrainConfig(seed=1))
    res = run_attack("pgd", tree, ds, PgdConfig(), surrogate=sur)
    assert res.metadata["transfer_target"] == "c45"
    assert np.array_equal(res.adv_pred, tree.predict(res.adversarial))
    assert np.array_equal(res.success, res.adv_pred != tree.predict(ds.features))
    with pytest.raises(NotDifferentiableError):
        run_attack("deepfool", tree, ds)


# -- shared contracts ---------------------------------------------------------

ATTACKS = [
    ("pgd", PgdConfig(iterations=5, seed=7)),
    ("deepfool", DeepFoolConfig(max_iterations=5)),
    ("zoo", ZooConfig(iterations=15, coords_per_iter=3, seed=7)),
]


@pytest.mark.parametrize("kind, cfg", ATTACKS)
def test_inputs_untouched_and_reruns_identical(small, kind, cfg):
    model, data = small
    before = data.features.copy()
    params = {k: v.copy() for k, v in model.params.items()}
    a = run_attack(kind, model, data, cfg)
    b = run_attack(kind, model, data, cfg)
    assert np.array_equal(data.features, before)
    assert all(np.array_equal(model.params[k], v) for k, v in params.items())
    assert a.adversarial.tobytes() == b.adversarial.tobytes()
    assert np.array_equal(a.queries, b.queries)


@pytest.mark.parametrize("kind, cfg", ATTACKS)
def test_sharded_equals_sequential(small, kind, cfg):
    model, data = small
    seq = run_attack(kind, model, data, cfg, workers=1)
    par = run_attack(kind, model, data, cfg, workers=4)
    assert seq.adversarial.tobytes() == par.adversarial.tobytes()
    assert np.array_equal(seq.success, par.success)
    assert np.array_equal(seq.queries, par.queries)


@pytest.mark.parametrize("kind, cfg", ATTACKS)
def test_success_means_prediction_changed(small, kind, cfg):
    model, data = small
    res = run_attack(kind, model, data, cfg)
    clean = np.argmax(model.predict_proba(data.features), axis=1)
    adv = np.argmax(model.predict_proba(res.adversarial), axis=1)
    assert np.array_equal(res.success, adv != clean)
    assert np.all(res.linf_norms >= 0) and np.all(res.l2_norms >= 0)


def test_result_save_load_round_trip(small, tmp_path):
    model, data = small
    res = run_attack("zoo", model, data, ZooConfig(iterations=10, seed=1))
    res.save(tmp_path / "out", data)
    lines = (tmp_path / "out" / "samples.jsonl").read_text().splitlines()
    assert len(lines) == data.n_samples
    assert set(json.loads(lines[0])) >= {"success", "linf", "l2", "queries"}
    back, adv = AttackResult.load(tmp_path / "out")
    assert back.adversarial.tobytes() == res.adversarial.tobytes()
    assert np.array_equal(back.success, res.success)
    assert np.array_equal(back.queries, res.queries)
    assert np.array_equal(adv.labels, data.labels)
    assert not list((tmp_path / "out").glob("*.partial"))


def test_unknown_attack():
    with pytest.raises(ValueError, match="unknown attack"):
        run_attack("fgsm", None, None)
