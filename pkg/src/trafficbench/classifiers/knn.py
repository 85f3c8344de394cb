from __future__ import annotations

import numpy as np

from trafficbench.classifiers.base import Classifier

# Upper bound on elements in one (queries x train x features) difference block.
_BLOCK_ELEMENTS = 1 << 22


class KnnModel(Classifier):
    """Lazy k-nearest-neighbour classifier with Euclidean distance.

    Probabilities are neighbour-vote frequencies. Equidistant neighbours are
    taken in training-row order, and argmax ties resolve to the smallest
    class index.
    """

    kind = "knn"

    def __init__(self, X, y, k, n_classes):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.k = int(k)
        self.n_classes = int(n_classes)
        self.n_features = self.X.shape[1]
        if not 1 <= self.k <= self.X.shape[0]:
            raise ValueError(f"k must lie in [1, {self.X.shape[0]}], got {k}")

    def neighbors(self, X):
        X = self._check(X)
        n_train, d = self.X.shape
        chunk = max(1, _BLOCK_ELEMENTS // max(1, n_train * d))
        out = np.empty((X.shape[0], self.k), dtype=np.int64)
        for s in range(0, X.shape[0], chunk):
            q = X[s:s + chunk]
            diff = q[:, None, :] - self.X[None, :, :]
            dist = np.einsum("qnd,qnd->qn", diff, diff)
            out[s:s + chunk] = np.argsort(dist, axis=1, kind="stable")[:, :self.k]
        return out

    def _proba(self, X):
        nb = self.neighbors(X)
        votes = np.zeros((X.shape[0], self.n_classes))
        rows = np.repeat(np.arange(X.shape[0]), self.k)
        np.add.at(votes, (rows, self.y[nb].ravel()), 1.0)
        return votes / self.k

    def tensors(self):
        return {"X": self.X, "y": self.y}

    def hyperparameters(self):
        return {"k": self.k, "n_classes": self.n_classes}


def train_knn(train, k: int = 5) -> KnnModel:
    if not 1 <= k <= train.n_samples:
        raise ValueError(f"k must lie in [1, {train.n_samples}], got {k}")
    return KnnModel(train.features, train.labels, k, train.n_classes)
