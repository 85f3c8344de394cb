"""C4.5-style decision tree for continuous features.

Gain-ratio splits at midpoints between adjacent observed values, Laplace
smoothed leaves, no error-based pruning.
"""

from __future__ import annotations

import numpy as np

from trafficbench.classifiers.base import Classifier

_MIN_GAIN = 1e-12


def _entropy_rows(counts):
    """Entropy (nats) of each row of a count matrix."""
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(totals > 0, counts / totals, 0.0)
        logs = np.where(p > 0, np.log(p), 0.0)
    return -(p * logs).sum(axis=1)


def _binary_entropy(frac):
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(frac > 0, frac * np.log(frac), 0.0)
        b = np.where(frac < 1, (1 - frac) * np.log(1 - frac), 0.0)
    return -(a + b)


def best_split(X, y, n_classes, min_leaf):
    """Best ``(feature, threshold, gain_ratio)`` or ``None``.

    Candidates leave at least ``min_leaf`` rows on each side. Only splits with
    positive information gain qualify; ties keep the lowest feature index and
    then the lowest threshold.
    """
    n, d = X.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    totals = onehot.sum(axis=0)
    parent_h = _entropy_rows(totals[None, :])[0]
    best = None
    for f in range(d):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]  # left holds rows [0, i]
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        idx = np.flatnonzero(valid)
        lc = left[idx]
        rc = totals - lc
        nl = n_left[idx].astype(np.float64)
        frac = nl / n
        gain = parent_h - frac * _entropy_rows(lc) - (1 - frac) * _entropy_rows(rc)
        split_info = _binary_entropy(frac)
        ok = gain > _MIN_GAIN
        if not ok.any():
            continue
        ratio = np.where(ok, gain / split_info, -np.inf)
        k = int(np.argmax(ratio))
        if best is None or ratio[k] > best[2]:
            i = idx[k]
            lo, hi = xs[i], xs[i + 1]
            thr = lo + (hi - lo) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best = (f, float(thr), float(ratio[k]))
    return best


class TreeModel(Classifier):
    kind = "c45"

    def __init__(self, feature, threshold, left, right, value, n_features, min_leaf=2):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.n_features = int(n_features)
        self.n_classes = self.value.shape[1]
        self.min_leaf = int(min_leaf)

    @property
    def n_nodes(self):
        return self.feature.size

    def is_leaf(self, node):
        return self.feature[node] < 0

    def depth(self, node=0):
        if self.is_leaf(node):
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def apply(self, X):
        """Leaf index reached by each row."""
        X = self._check(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            cur = node[rows]
            go_left = X[rows, self.feature[cur]] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return node

    def _proba(self, X):
        return self.value[self.apply(X)]

    def tensors(self):
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left, "right": self.right, "value": self.value}

    def hyperparameters(self):
        return {"min_leaf": self.min_leaf}


def train_tree(train, min_leaf: int = 2) -> TreeModel:
    """Grow a gain-ratio tree top-down.

    A node becomes a leaf when it is pure, holds fewer than ``2 * min_leaf``
    rows, or admits no split with positive information gain. Leaves store
    ``(n_c + 1) / (n + C)``.
    """
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    X, y = train.features, train.labels
    C = train.n_classes
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(rows):
        counts = np.bincount(y[rows], minlength=C)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append((counts + 1.0) / (rows.size + C))
        return len(feature) - 1

    root_rows = np.arange(X.shape[0])
    stack = [(new_node(root_rows), root_rows)]
    while stack:
        node, rows = stack.pop()
        labels = y[rows]
        if np.all(labels == labels[0]) or rows.size < 2 * min_leaf:
            continue
        found = best_split(X[rows], labels, C, min_leaf)
        if found is None:
            continue
        f, thr, _ = found
        mask = X[rows, f] <= thr
        lrows, rrows = rows[mask], rows[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], rrows))
        stack.append((left[node], lrows))
    return TreeModel(feature, threshold, left, right, value, X.shape[1], min_leaf)
