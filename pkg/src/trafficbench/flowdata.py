"""Flow-feature datasets: schema, ARFF/CSV ingestion, splitting, synthesis.

A :class:`Dataset` is an immutable ``N x D`` float64 matrix plus integer
labels and a :class:`FeatureSchema`. Every other module consumes and
produces Datasets.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from trafficbench import _atomic

TIME_US = "numeric-time-microseconds"
COUNT = "numeric-count"
RATE = "numeric-rate"
FEATURE_KINDS = (TIME_US, COUNT, RATE)

MISSING = "?"


class FlowDataError(ValueError):
    """Malformed or inconsistent flow-feature input."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: tuple
    feature_kinds: tuple
    class_names: tuple

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "feature_kinds", tuple(self.feature_kinds))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(set(self.feature_names)) != len(self.feature_names):
            raise FlowDataError("feature names must be unique")
        if not self.class_names:
            raise FlowDataError("schema needs at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            raise FlowDataError("class names must be unique")
        if len(self.feature_kinds) != len(self.feature_names):
            raise FlowDataError("feature_kinds and feature_names differ in length")
        bad = [k for k in self.feature_kinds if k not in FEATURE_KINDS]
        if bad:
            raise FlowDataError(f"unknown feature kind(s): {bad}")

    @property
    def n_features(self):
        return len(self.feature_names)

    @property
    def n_classes(self):
        return len(self.class_names)

    def to_dict(self):
        return {
            "feature_names": list(self.feature_names),
            "feature_kinds": list(self.feature_kinds),
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature_names"], d["feature_kinds"], d["class_names"])

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_features(self, indices):
        idx = list(indices)
        return FeatureSchema(
            [self.feature_names[i] for i in idx],
            [self.feature_kinds[i] for i in idx],
            self.class_names,
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    schema: FeatureSchema
    dropped_rows: int = field(default=0, compare=False)

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, copy=True)
        if X.ndim != 2:
            raise FlowDataError(f"features must be 2-D, got shape {X.shape}")
        n, d = X.shape
        if n < 1 or d < 1:
            raise FlowDataError("empty dataset")
        if d != self.schema.n_features:
            raise FlowDataError(
                f"matrix has {d} columns but schema declares {self.schema.n_features}"
            )
        if not np.all(np.isfinite(X)):
            raise FlowDataError("features contain NaN or Inf")
        if y.shape != (n,):
            raise FlowDataError(f"labels must have shape ({n},), got {y.shape}")
        if y.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise FlowDataError("labels must be integer class indices")
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= self.schema.n_classes:
            raise FlowDataError("label index outside [0, n_classes)")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        return self.schema.n_classes

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.labels[rows], self.schema)

    def with_features(self, X, schema=None):
        """Same labels, replaced feature matrix (and optionally schema)."""
        return Dataset(X, self.labels, schema or self.schema)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.schema.fingerprint().encode())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


# Time-related flow features of the ISCX VPN-NonVPN corpus, in file order.
ISCX_FEATURES = (
    "duration", "total_fiat", "total_biat", "min_fiat", "min_biat",
    "max_fiat", "max_biat", "mean_fiat", "mean_biat", "flowPktsPerSecond",
    "flowBytesPerSecond", "min_flowiat", "max_flowiat", "mean_flowiat",
    "std_flowiat", "min_active", "mean_active", "max_active", "std_active",
    "min_idle", "mean_idle", "max_idle", "std_idle",
)
ISCX_CLASSES = (
    "BROWSING", "CHAT", "FT", "MAIL", "P2P", "STREAMING", "VOIP",
    "VPN-BROWSING", "VPN-CHAT", "VPN-FT", "VPN-MAIL", "VPN-P2P",
    "VPN-STREAMING", "VPN-VOIP",
)
# NetMate-style attributes of the NIMS SSH corpus. The timing columns sit at
# the positions the published top-5 table reports (mean_fiat=9 ... duration=16);
# the remaining names are a best-effort reconstruction.
NIMS_FEATURES = (
    "min_fpktl", "mean_fpktl", "max_fpktl", "std_fpktl",
    "min_bpktl", "mean_bpktl", "max_bpktl", "std_bpktl",
    "min_fiat", "mean_fiat", "max_fiat", "std_fiat",
    "min_biat", "mean_biat", "max_biat", "std_biat",
    "duration", "proto", "total_fpackets", "total_fvolume",
    "total_bpackets", "total_bvolume",
)
NIMS_CLASSES = (
    "localForwarding", "remoteForwarding", "scp", "sftp", "x11", "shell",
)


def infer_kind(name):
    low = name.lower()
    if "persecond" in low or "per_second" in low or "rate" in low:
        return RATE
    if any(tok in low for tok in ("pkt", "packets", "volume", "bytes", "proto", "port", "count")):
        return COUNT
    return TIME_US


def make_schema(feature_names, class_names, kinds=None):
    kinds = kinds if kinds is not None else [infer_kind(n) for n in feature_names]
    return FeatureSchema(feature_names, kinds, class_names)


ISCX_SCHEMA = make_schema(ISCX_FEATURES, ISCX_CLASSES)
NIMS_SCHEMA = make_schema(NIMS_FEATURES, NIMS_CLASSES)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _read_text(text):
    if isinstance(text, str):
        return text
    return text.read()


def _unquote(tok):
    tok = tok.strip()
    if len(tok) >= 2 and tok[0] == tok[-1] and tok[0] in "'\"":
        return tok[1:-1]
    return tok


_ATTR_RE = re.compile(
    r"""^@attribute\s+('[^']*'|"[^"]*"|\S+)\s+(.+?)\s*$""", re.IGNORECASE
)


def _parse_number(tok, lineno):
    try:
        return float(tok)
    except ValueError:
        raise FlowDataError(f"non-numeric value {tok!r}", line=lineno) from None


def _check_hint(hint, feature_names, class_names):
    if hint is None:
        return None
    if len(hint.feature_names) != len(feature_names):
        raise FlowDataError(
            f"schema hint declares {len(hint.feature_names)} features, "
            f"input has {len(feature_names)}"
        )
    if class_names is not None and set(class_names) - set(hint.class_names):
        extra = sorted(set(class_names) - set(hint.class_names))
        raise FlowDataError(f"classes {extra} not present in schema hint")
    return hint


def _finish(rows, labels, schema, dropped):
    if not rows:
        raise FlowDataError("empty dataset")
    X = np.asarray(rows, dtype=np.float64)
    return Dataset(X, np.asarray(labels, dtype=np.int64), schema, dropped_rows=dropped)


def parse_arff(text, schema_hint: Optional[FeatureSchema] = None) -> Dataset:
    """Parse the ARFF subset used by flow-feature corpora.

    Numeric attributes become features; the last attribute must be nominal
    and holds the class. Rows with a ``?`` (or a non-finite number) are
    dropped and counted in ``Dataset.dropped_rows``. Class indices follow
    declaration order.
    """
    lines = _read_text(text).splitlines()
    attrs = []  # (name, nominal values or None)
    in_data = False
    rows, labels = [], []
    dropped = 0
    class_index = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        if not in_data:
            low = line.lower()
            if low.startswith("@relation"):
                continue
            if low.startswith("@attribute"):
                m = _ATTR_RE.match(line)
                if not m:
                    raise FlowDataError(f"malformed attribute declaration: {line!r}", lineno)
                name, kind = _unquote(m.group(1)), m.group(2).strip()
                if kind.startswith("{"):
                    if not kind.endswith("}"):
                        raise FlowDataError(f"unterminated nominal list: {kind!r}", lineno)
                    values = [_unquote(v) for v in kind[1:-1].split(",")]
                    values = [v for v in values if v != ""]
                    if not values:
                        raise FlowDataError("empty nominal list", lineno)
                    attrs.append((name, values))
                elif kind.lower() in ("numeric", "real", "integer"):
                    attrs.append((name, None))
                else:
                    raise FlowDataError(f"unsupported attribute type {kind!r}", lineno)
                continue
            if low.startswith("@data"):
                if len(attrs) < 2:
                    raise FlowDataError("need at least one feature and a class attribute", lineno)
                if attrs[-1][1] is None:
                    raise FlowDataError("last attribute must be the nominal class", lineno)
                nominal_features = [a[0] for a in attrs[:-1] if a[1] is not None]
                if nominal_features:
                    raise FlowDataError(
                        f"nominal feature attributes are not supported: {nominal_features}", lineno
                    )
                feature_names = [a[0] for a in attrs[:-1]]
                class_names = attrs[-1][1]
                hint = _check_hint(schema_hint, feature_names, class_names)
                schema = hint or make_schema(feature_names, class_names)
                class_index = {c: schema.class_names.index(c) for c in class_names}
                in_data = True
                continue
            raise FlowDataError(f"unexpected header line {line!r}", lineno)

        toks = [t.strip() for t in line.split(",")]
        if len(toks) != len(attrs):
            raise FlowDataError(
                f"row has {len(toks)} values, expected {len(attrs)}", lineno
            )
        if any(t == MISSING for t in toks):
            dropped += 1
            continue
        label = _unquote(toks[-1])
        if label not in class_index:
            raise FlowDataError(f"unknown nominal value {label!r}", lineno)
        vals = [_parse_number(t, lineno) for t in toks[:-1]]
        if not all(math.isfinite(v) for v in vals):
            dropped += 1
            continue
        rows.append(vals)
        labels.append(class_index[label])

    if not in_data:
        raise FlowDataError("no @data section")
    return _finish(rows, labels, schema, dropped)


def parse_csv(text, label_column: str = "class",
              schema_hint: Optional[FeatureSchema] = None) -> Dataset:
    """Parse a comma-separated table with a header row.

    Class indices follow first appearance unless ``schema_hint`` fixes the
    class order (used to round-trip the canonical serialization).
    """
    reader = csv.reader(io.StringIO(_read_text(text)))
    try:
        header = next(reader)
    except StopIteration:
        raise FlowDataError("missing header") from None
    header = [h.strip() for h in header]
    if not any(header):
        raise FlowDataError("missing header", line=1)
    if label_column not in header:
        raise FlowDataError(f"unknown label column {label_column!r}", line=1)
    li = header.index(label_column)
    feature_names = header[:li] + header[li + 1:]
    hint = _check_hint(schema_hint, feature_names, None)
    class_order = list(hint.class_names) if hint else []
    class_index = {c: i for i, c in enumerate(class_order)}
    rows, labels = [], []
    dropped = 0
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not t.strip() for t in rec):
            continue
        if len(rec) != len(header):
            raise FlowDataError(f"row has {len(rec)} values, expected {len(header)}", lineno)
        toks = [t.strip() for t in rec]
        if any(t in (MISSING, "") for t in toks):
            dropped += 1
            continue
        label = toks[li]
        vals = [_parse_number(t, lineno) for j, t in enumerate(toks) if j != li]
        if not all(math.isfinite(v) for v in vals):
            dropped += 1
            continue
        if label not in class_index:
            if hint:
                raise FlowDataError(f"unknown class {label!r}", lineno)
            class_index[label] = len(class_order)
            class_order.append(label)
        rows.append(vals)
        labels.append(class_index[label])
    if not rows:
        raise FlowDataError("empty dataset")
    schema = hint or make_schema(feature_names, class_order)
    return _finish(rows, labels, schema, dropped)


def to_csv(dataset: Dataset, label_column: str = "class") -> str:
    """Canonical CSV serialization; floats use shortest round-trip repr."""
    if label_column in dataset.schema.feature_names:
        raise FlowDataError(f"label column {label_column!r} clashes with a feature name")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(dataset.schema.feature_names) + [label_column])
    names = dataset.schema.class_names
    for row, lab in zip(dataset.features.tolist(), dataset.labels.tolist()):
        w.writerow([repr(v) for v in row] + [names[lab]])
    return buf.getvalue()


def save_dataset(dataset: Dataset, path, label_column="class"):
    """Write ``path`` (CSV) plus a ``<path>.schema.json`` sidecar."""
    path = Path(path)
    _atomic.write_text(path, to_csv(dataset, label_column))
    meta = {"label_column": label_column, **dataset.schema.to_dict()}
    _atomic.write_text(str(path) + ".schema.json", json.dumps(meta, indent=2) + "\n")


def load_dataset(path, label_column=None) -> Dataset:
    """Load an ARFF or CSV file; a ``.schema.json`` sidecar fixes class order."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    sidecar = Path(str(path) + ".schema.json")
    hint = None
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        hint = FeatureSchema.from_dict(meta)
        label_column = label_column or meta.get("label_column")
    if path.suffix.lower() == ".arff" or text.lstrip().lower().startswith(("@relation", "%")):
        return parse_arff(text, hint)
    return parse_csv(text, label_column or "class", hint)


# ---------------------------------------------------------------------------
# Splitting and subsetting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise FlowDataError("train_fraction must lie in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise FlowDataError("seed must be an unsigned 64-bit integer")


def split_indices(dataset: Dataset, spec: SplitSpec):
    """Return sorted ``(train_idx, test_idx)``; train size is floor(n * fraction)."""
    rng = np.random.default_rng(int(spec.seed))
    if spec.stratified:
        counts = dataset.class_counts()
        short = [dataset.schema.class_names[c] for c in np.flatnonzero((counts > 0) & (counts < 2))]
        if short:
            raise FlowDataError(f"stratified split needs >= 2 rows per class; too few for {short}")
        train, test = [], []
        for c in range(dataset.n_classes):
            rows = np.flatnonzero(dataset.labels == c)
            if rows.size == 0:
                continue
            rows = rng.permutation(rows)
            n_train = int(math.floor(rows.size * spec.train_fraction))
            train.append(rows[:n_train])
            test.append(rows[n_train:])
        train = np.concatenate(train)
        test = np.concatenate(test)
    else:
        perm = rng.permutation(dataset.n_samples)
        n_train = int(math.floor(dataset.n_samples * spec.train_fraction))
        train, test = perm[:n_train], perm[n_train:]
    if train.size == 0 or test.size == 0:
        raise FlowDataError(
            f"split of {dataset.n_samples} rows at {spec.train_fraction} leaves an empty side"
        )
    return np.sort(train), np.sort(test)


def split(dataset: Dataset, spec: SplitSpec):
    train_idx, test_idx = split_indices(dataset, spec)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def select_traffic(dataset: Dataset, which: str) -> Dataset:
    """Restrict an ISCX-style dataset to VPN, NonVPN or Combined classes.

    VPN classes are those whose name starts with ``VPN`` (case-insensitive).
    Classes are re-indexed over those kept, preserving their order.
    """
    key = which.lower().replace("-", "").replace("_", "")
    if key == "combined":
        return dataset
    if key not in ("vpn", "nonvpn"):
        raise FlowDataError(f"unknown traffic selector {which!r}")
    is_vpn = [name.lower().startswith("vpn") for name in dataset.schema.class_names]
    keep = [c for c, v in enumerate(is_vpn) if v == (key == "vpn")]
    if not keep:
        raise FlowDataError(f"no {which} classes in dataset")
    rows = np.flatnonzero(np.isin(dataset.labels, keep))
    if rows.size == 0:
        raise FlowDataError(f"no {which} rows in dataset")
    remap = np.full(dataset.n_classes, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    schema = FeatureSchema(
        dataset.schema.feature_names,
        dataset.schema.feature_kinds,
        [dataset.schema.class_names[c] for c in keep],
    )
    return Dataset(dataset.features[rows], remap[dataset.labels[rows]], schema)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int = 200
    n_classes: int = 2
    n_informative: int = 2
    n_noise: int = 0
    class_separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise FlowDataError("n_classes must be >= 2")
        if self.n_informative < 1:
            raise FlowDataError("n_informative must be >= 1")
        if self.n_noise < 0:
            raise FlowDataError("n_noise must be >= 0")
        if self.n_per_class < 1:
            raise FlowDataError("n_per_class must be >= 1")
        if not self.class_separation > 0:
            raise FlowDataError("class_separation must be > 0")


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """``C x n_informative`` matrix of class-conditional means.

    Class ``c`` sits at ``separation * ((c + j) mod C)`` on informative
    feature ``j``, so neighbouring classes differ by exactly the separation
    on every informative feature and the offset direction alternates.
    """
    c = np.arange(spec.n_classes)[:, None]
    j = np.arange(spec.n_informative)[None, :]
    return spec.class_separation * ((c + j) % spec.n_classes).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Unit-variance class-conditional Gaussians plus label-independent noise columns."""
    rng = np.random.default_rng(int(spec.seed))
    n = spec.n_per_class * spec.n_classes
    labels = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    informative = rng.standard_normal((n, spec.n_informative)) + class_means(spec)[labels]
    noise = rng.standard_normal((n, spec.n_noise))
    X = np.hstack([informative, noise])
    perm = rng.permutation(n)
    names = [f"inf_{j}" for j in range(spec.n_informative)] + [
        f"noise_{j}" for j in range(spec.n_noise)
    ]
    schema = FeatureSchema(names, [TIME_US] * len(names),
                           [f"class_{c}" for c in range(spec.n_classes)])
    return Dataset(X[perm], labels[perm], schema)


def synthetic_arff(spec: SyntheticSpec, relation="synthetic") -> str:
    """Render a synthetic dataset as ARFF text (handy for CLI demos)."""
    ds = generate_synthetic(spec)
    return to_arff(ds, relation)


def to_arff(dataset: Dataset, relation="flows", class_attribute="class") -> str:
    out = [f"@relation {relation}", ""]
    for name in dataset.schema.feature_names:
        out.append(f"@attribute {name} numeric")
    out.append(f"@attribute {class_attribute} {{{','.join(dataset.schema.class_names)}}}")
    out += ["", "@data"]
    names = dataset.schema.class_names
    for row, lab in zip(dataset.features.tolist(), dataset.labels.tolist()):
        out.append(",".join(repr(v) for v in row) + "," + names[lab])
    return "\n".join(out) + "\n"
