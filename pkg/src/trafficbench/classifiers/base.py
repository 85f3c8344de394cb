from __future__ import annotations

import numpy as np


class NotDifferentiableError(TypeError):
    """Raised when a gradient is requested from a piecewise-constant model."""


class Classifier:
    """Uniform query surface shared by every model family.

    Subclasses implement ``_proba`` on a validated ``(N, D)`` batch.
    """

    kind: str = ""
    differentiable = False
    n_features: int
    n_classes: int

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"dimension mismatch: model expects {self.n_features} features, "
                f"got shape {np.shape(X)}"
            )
        return X

    def predict_proba(self, X):
        return self._proba(self._check(X))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def _proba(self, X):  # pragma: no cover - abstract
        raise NotImplementedError

    # Gradient surface; only neural models override these.
    def logit_jacobian(self, X):
        raise NotDifferentiableError(f"{self.kind} models expose no input gradients")

    def loss_grad(self, X, y):
        raise NotDifferentiableError(f"{self.kind} models expose no input gradients")

    def logits(self, X):
        raise NotDifferentiableError(f"{self.kind} models expose no logits")
