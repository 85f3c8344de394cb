"""Z-score scaling and mutual-information feature ranking."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from trafficbench.flowdata import Dataset

DEFAULT_BINS = 10


@dataclass(frozen=True, eq=False)
class ScalerParams:
    mean: np.ndarray
    std: np.ndarray
    constant_mask: np.ndarray

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant_mask": self.constant_mask.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64),
                   np.asarray(d["constant_mask"], dtype=bool))


def fit_scaler(train: Dataset) -> ScalerParams:
    """Per-column mean and population standard deviation of the training rows."""
    X = train.features
    mean = X.mean(axis=0)
    std = X.std(axis=0)  # ddof=0
    constant = ~(std > 0)
    return ScalerParams(mean, std, constant)


def apply_scaler(data: Dataset, params: ScalerParams) -> Dataset:
    if data.n_features != params.mean.shape[0]:
        raise ValueError(
            f"dimension mismatch: data has {data.n_features} features, "
            f"scaler was fitted on {params.mean.shape[0]}"
        )
    return data.with_features(scale_matrix(data.features, params))


def scale_matrix(X, params: ScalerParams):
    safe_std = np.where(params.constant_mask, 1.0, params.std)
    out = (X - params.mean) / safe_std
    out[:, params.constant_mask] = 0.0
    return out


def equal_frequency_bins(column, bins):
    """Assign each value a bin in ``[0, bins)`` by rank; ties share a bin.

    Rank-based binning makes the result invariant to strictly increasing
    transforms of the column.
    """
    column = np.asarray(column, dtype=np.float64)
    ranks = rankdata(column, method="min") - 1  # 0-based, ties take the lowest rank
    return (ranks * bins // column.size).astype(np.int64)


def mutual_information(feature_column, labels, bins: int = DEFAULT_BINS) -> float:
    """Plug-in mutual information (nats) between a binned feature and class labels."""
    x = np.asarray(feature_column, dtype=np.float64)
    y = np.asarray(labels)
    n = x.size
    if y.shape != x.shape:
        raise ValueError("feature column and labels differ in length")
    if not 2 <= bins <= n:
        raise ValueError(f"need N >= bins >= 2, got N={n}, bins={bins}")
    b = equal_frequency_bins(x, bins)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((bins, yi.max() + 1))
    np.add.at(joint, (b, yi), 1.0)
    joint /= n
    pb = joint.sum(axis=1, keepdims=True)
    pc = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (pb @ pc)[nz])))
    return max(mi, 0.0)


@dataclass(frozen=True)
class FeatureRanking:
    """Features sorted by MI descending, ties by ascending index."""

    entries: tuple  # of (feature_index, mi_nats)
    feature_names: tuple = ()

    @property
    def order(self):
        return [i for i, _ in self.entries]

    def top(self, k):
        return self.order[:k]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature_index", "feature_name", "mi_nats"])
        for idx, mi in self.entries:
            name = self.feature_names[idx] if self.feature_names else ""
            w.writerow([idx, name, f"{mi:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        entries = tuple((int(r["feature_index"]), float(r["mi_nats"])) for r in rows)
        names = {int(r["feature_index"]): r["feature_name"] for r in rows}
        feature_names = tuple(names[i] for i in range(len(names))) if names else ()
        return cls(entries, feature_names)


def rank_features(train: Dataset, bins: int = DEFAULT_BINS) -> FeatureRanking:
    bins = min(bins, train.n_samples)
    scores = [mutual_information(train.features[:, j], train.labels, bins)
              for j in range(train.n_features)]
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return FeatureRanking(tuple((j, scores[j]) for j in order),
                          tuple(train.schema.feature_names))


def select_top_k(data: Dataset, ranking: FeatureRanking, k: int) -> Dataset:
    if not 1 <= k <= data.n_features:
        raise ValueError(f"k must lie in [1, {data.n_features}], got {k}")
    if len(ranking.entries) != data.n_features:
        raise ValueError("ranking does not cover the dataset's features")
    cols = ranking.top(k)
    return Dataset(data.features[:, cols], data.labels, data.schema.with_features(cols))
