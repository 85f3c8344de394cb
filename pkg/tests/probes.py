"""Test instruments: finite-difference gradient probes and a query-only model wrapper."""

import numpy as np

from oracles import max_relative_error
from trafficbench.classifiers.neural import softmax


def relu_pattern(model, X):
    """Sign pattern of every ReLU pre-activation, one row per input (empty for rnn)."""
    if model.kind == "rnn":
        return np.zeros((X.shape[0], 0), dtype=bool)
    stack = model.forward(X)[1][0]
    return np.hstack([(entry[1] > 0).reshape(X.shape[0], -1) for entry in stack])


def _stencil(X, h):
    D = X.shape[1]
    E = np.eye(D) * h
    return (X[:, None, :] + E[None]).reshape(-1, D), (X[:, None, :] - E[None]).reshape(-1, D)


def smooth_probes(model, n, h, rng):
    """``n`` Gaussian inputs whose +/- h stencil stays on one side of every ReLU kink.

    Returns the probes and how many candidates were rejected.
    """
    D = model.n_features
    X = rng.standard_normal((3 * n, D))
    plus, minus = _stencil(X, h)
    centre = np.repeat(relu_pattern(model, X), D, axis=0)
    ok = np.all(relu_pattern(model, plus) == centre, axis=1)
    ok &= np.all(relu_pattern(model, minus) == centre, axis=1)
    keep = np.flatnonzero(ok.reshape(-1, D).all(axis=1))
    if keep.size < n:
        raise RuntimeError("too many probes straddle a ReLU kink")
    return X[keep[:n]], int(keep[n - 1] + 1 - n)


def gradient_errors(model, X, labels, h):
    """Max relative error of the logit Jacobian and loss gradient vs central differences."""
    n, D = X.shape
    C = model.n_classes
    plus, minus = _stencil(X, h)
    zp = model.logits(plus).reshape(n, D, C)
    zm = model.logits(minus).reshape(n, D, C)
    J_fd = ((zp - zm) / (2 * h)).transpose(0, 2, 1)
    sel = (np.arange(n)[:, None], np.arange(D)[None, :], labels[:, None])
    lp = np.log(softmax(zp.reshape(-1, C))).reshape(n, D, C)[sel]
    lm = np.log(softmax(zm.reshape(-1, C))).reshape(n, D, C)[sel]
    G_fd = -(lp - lm) / (2 * h)
    return (max_relative_error(model.logit_jacobian(X), J_fd),
            max_relative_error(model.loss_grad(X, labels), G_fd))


class QueryOnly:
    """Exposes predict_proba and counts any attempt to use gradient surfaces."""

    def __init__(self, model):
        self._model = model
        self.kind = model.kind
        self.n_classes = model.n_classes
        self.proba_calls = 0
        self.gradient_calls = 0

    def predict_proba(self, X):
        self.proba_calls += 1
        return self._model.predict_proba(X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def _forbidden(self, *args, **kwargs):
        self.gradient_calls += 1
        raise AssertionError("gradient surface used by a query-only attack")

    logits = logit_jacobian = loss_grad = forward = backward = _forbidden
