"""Independent reference computations used to check the library.

Nothing here imports the code paths it is used to verify.
"""

import math

import numpy as np


def best_threshold_accuracy(values, labels):
    """Exhaustive sweep of 1-D threshold rules ``value > t`` in both polarities."""
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels)
    cands = np.unique(values)
    cuts = np.concatenate([[cands[0] - 1.0], (cands[:-1] + cands[1:]) / 2, [cands[-1] + 1.0]])
    best = 0.0
    for t in cuts:
        pred = (values > t).astype(int)
        acc = max((pred == labels).mean(), ((1 - pred) == labels).mean())
        best = max(best, acc)
    return best


def entropy(counts):
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    return -sum(c / n * math.log(c / n) for c in counts if c > 0)


def gain_ratio_table(x, y):
    """Gain ratio at every midpoint threshold of a 1-D feature, by direct counting."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    classes = np.unique(y)
    parent = entropy([np.sum(y == c) for c in classes])
    vals = np.unique(x)
    out = {}
    for a, b in zip(vals[:-1], vals[1:]):
        t = (a + b) / 2
        left, right = y[x <= t], y[x > t]
        n = len(y)
        h = (len(left) / n * entropy([np.sum(left == c) for c in classes])
             + len(right) / n * entropy([np.sum(right == c) for c in classes]))
        split_info = entropy([len(left), len(right)])
        out[t] = (parent - h) / split_info
    return out


def best_depth2_tree_accuracy(X, y):
    """Brute force over all axis-aligned trees of depth <= 2 with majority leaves."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n, d = X.shape

    def cuts(rows):
        out = []
        for f in range(d):
            v = np.unique(X[rows, f])
            out += [(f, t) for t in (v[:-1] + v[1:]) / 2]
        return out

    def leaf_correct(rows):
        return np.bincount(y[rows]).max() if rows.size else 0

    def depth1(rows):
        best = leaf_correct(rows)
        for f, t in cuts(rows):
            m = X[rows, f] <= t
            best = max(best, leaf_correct(rows[m]) + leaf_correct(rows[~m]))
        return best

    rows = np.arange(n)
    best = leaf_correct(rows)
    for f, t in cuts(rows):
        m = X[:, f] <= t
        best = max(best, depth1(rows[m]) + depth1(rows[~m]))
    return best / n


def knn_vote(train_X, train_y, x, k, n_classes):
    """Sort every training point by distance and tally the first k labels."""
    dists = [(math.dist(list(p), list(x)), i) for i, p in enumerate(train_X)]
    dists.sort()
    votes = [0] * n_classes
    for _, i in dists[:k]:
        votes[train_y[i]] += 1
    return [v / k for v in votes]


def central_jacobian(fn, x, h=1e-5):
    """Central finite-difference Jacobian of a vector function at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def max_relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def hyperplane_distance(w, b, x):
    """Euclidean distance from ``x`` to ``{z : w.z + b = 0}``."""
    return abs(float(np.dot(w, x) + b)) / float(np.linalg.norm(w))


def plugin_mi(x_bins, y):
    """Mutual information of two discrete sequences from their joint histogram."""
    n = len(x_bins)
    joint = {}
    for a, b in zip(x_bins, y):
        joint[(a, b)] = joint.get((a, b), 0) + 1
    px, py = {}, {}
    for (a, b), c in joint.items():
        px[a] = px.get(a, 0) + c
        py[b] = py.get(b, 0) + c
    return sum(c / n * math.log((c / n) / ((px[a] / n) * (py[b] / n)))
               for (a, b), c in joint.items())

