"""The five classifier families behind one probability/gradient surface."""

import numpy as np

from trafficbench.classifiers.base import Classifier, NotDifferentiableError
from trafficbench.classifiers.knn import KnnModel, train_knn
from trafficbench.classifiers.neural import (
    DEFAULT_HIDDEN,
    NEURAL_KINDS,
    NeuralModel,
    NeuralTrainingError,
    TrainConfig,
    train_neural,
)
from trafficbench.classifiers.serialize import dumps_model, load_model, loads_model, save_model
from trafficbench.classifiers.tree import TreeModel, train_tree

MODEL_KINDS = ("c45", "knn") + NEURAL_KINDS


def train_model(kind, train, cfg=TrainConfig(), knn_k=5, min_leaf=2):
    if kind == "c45":
        return train_tree(train, min_leaf)
    if kind == "knn":
        return train_knn(train, knn_k)
    if kind in NEURAL_KINDS:
        return train_neural(train, kind, cfg)
    raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")


def predict_proba(model, x):
    """Class probabilities for one row (returns a vector) or a batch (a matrix)."""
    out = model.predict_proba(x)
    return out[0] if np.ndim(x) == 1 else out


def grad_logits(model, x):
    """``C x D`` Jacobian of the pre-softmax logits at a single input row."""
    if not getattr(model, "differentiable", False):
        raise NotDifferentiableError(f"{model.kind} models expose no input gradients")
    return model.logit_jacobian(np.asarray(x, dtype=np.float64)[None, :])[0]


def grad_loss(model, x, label):
    """Gradient of the cross-entropy loss at ``(x, label)`` w.r.t. ``x``."""
    if not getattr(model, "differentiable", False):
        raise NotDifferentiableError(f"{model.kind} models expose no input gradients")
    return model.loss_grad(np.asarray(x, dtype=np.float64)[None, :], [label])[0]


__all__ = [
    "Classifier", "NotDifferentiableError", "KnnModel", "TreeModel", "NeuralModel",
    "NeuralTrainingError", "TrainConfig", "MODEL_KINDS", "NEURAL_KINDS", "DEFAULT_HIDDEN",
    "train_tree", "train_knn", "train_neural", "train_model", "predict_proba",
    "grad_logits", "grad_loss", "save_model", "load_model", "dumps_model", "loads_model",
]
