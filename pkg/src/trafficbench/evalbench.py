"""Metrics, experiment orchestration and report emission.

``run_experiment`` executes the whole protocol for one plan: ingest, split
80/20, scale on train, rank features by MI on train, keep the top k, train
each model, score the clean test split, then attack it and score again.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

import trafficbench
from trafficbench import _atomic
from trafficbench.attacks import (
    ATTACK_KINDS,
    CONFIG_TYPES,
    AttackResult,
    run_attack,
    train_surrogate,
)
from trafficbench.classifiers import MODEL_KINDS, TrainConfig, train_model
from trafficbench.flowdata import (
    Dataset,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    select_traffic,
    split_indices,
)
from trafficbench.preprocess import DEFAULT_BINS, apply_scaler, fit_scaler, rank_features, select_top_k

log = logging.getLogger(__name__)

MACRO = "__macro__"
CSV_HEADER = ["dataset", "model", "attack", "class", "precision", "recall", "f1"]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion counts must be a square matrix")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def tp(self):
        return np.diag(self.counts)

    @property
    def fp(self):
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self):
        return self.counts.sum(axis=1) - self.tp

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes):
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts)


def confusion(model, data: Dataset) -> ConfusionMatrix:
    if data.n_samples < 1:
        raise ValueError("empty dataset")
    return ConfusionMatrix.from_predictions(data.labels, model.predict(data.features),
                                            data.n_classes)


def _ratio(num, den):
    return np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    average: str = "macro"

    @property
    def per_class(self):
        return list(zip(self.precision.tolist(), self.recall.tolist(), self.f1.tolist()))

    def to_dict(self):
        return {
            "confusion": self.confusion.counts.tolist(),
            "per_class": [{"precision": p, "recall": r, "f1": f} for p, r, f in self.per_class],
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "average": self.average,
        }

    @classmethod
    def from_dict(cls, d):
        pc = d["per_class"]
        return cls(
            ConfusionMatrix(np.array(d["confusion"])),
            np.array([c["precision"] for c in pc], dtype=float),
            np.array([c["recall"] for c in pc], dtype=float),
            np.array([c["f1"] for c in pc], dtype=float),
            d["macro_precision"], d["macro_recall"], d["macro_f1"], d["accuracy"],
            d.get("average", "macro"),
        )


def metrics(cm: ConfusionMatrix, average: str = "macro") -> EvalReport:
    """Per-class precision/recall/F1 with zero-denominator results set to 0.

    ``average="macro"`` takes the unweighted class mean; ``"weighted"``
    weights classes by their true-row support.
    """
    if cm.total < 1:
        raise ValueError("confusion matrix holds no samples")
    tp, fp, fn = (a.astype(np.float64) for a in (cm.tp, cm.fp, cm.fn))
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = _ratio(2 * p * r, p + r)
    if average == "macro":
        w = np.full(cm.n_classes, 1.0 / cm.n_classes)
    elif average == "weighted":
        support = cm.counts.sum(axis=1).astype(np.float64)
        w = support / support.sum()
    else:
        raise ValueError(f"unknown average {average!r}")
    return EvalReport(cm, p, r, f1, float(w @ p), float(w @ r), float(w @ f1),
                      float(tp.sum() / cm.total), average)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

@dataclass
class DataSource:
    """Either a file (ARFF/CSV) or a synthetic generator spec."""

    path: Optional[str] = None
    label_column: Optional[str] = None
    selector: str = "combined"
    synthetic: Optional[dict] = None
    name: Optional[str] = None

    def __post_init__(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("dataset needs exactly one of 'path' or 'synthetic'")

    @property
    def display_name(self):
        if self.name:
            return self.name
        base = Path(self.path).stem if self.path else "synthetic"
        return base if self.selector.lower() == "combined" else f"{base}-{self.selector}"

    def load(self, base_dir=None):
        if self.synthetic is not None:
            ds = generate_synthetic(SyntheticSpec(**self.synthetic))
        else:
            path = Path(self.path)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            ds = load_dataset(path, self.label_column)
        return select_traffic(ds, self.selector)


@dataclass
class ExperimentPlan:
    dataset: DataSource
    models: tuple = MODEL_KINDS
    attacks: tuple = ("none",)
    k_features: int = 5
    bins: int = DEFAULT_BINS
    train_fraction: float = 0.8
    stratified: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    attack_configs: dict = field(default_factory=dict)
    knn_k: int = 5
    min_leaf: int = 2
    seed: int = 0
    average: str = "macro"
    max_attack_samples: Optional[int] = None
    save_adversarial: bool = True

    def __post_init__(self):
        self.models = tuple(self.models)
        if not self.models:
            raise ValueError("plan needs at least one model")
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise ValueError(f"unknown model kind(s) {bad}; choose from {MODEL_KINDS}")
        attacks = [a for a in self.attacks if a != "none"]
        bad = [a for a in attacks if a not in ATTACK_KINDS]
        if bad:
            raise ValueError(f"unknown attack kind(s) {bad}; choose from {ATTACK_KINDS}")
        self.attacks = ("none",) + tuple(dict.fromkeys(attacks))
        if self.k_features < 1:
            raise ValueError("k_features must be >= 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dataset"] = DataSource(**d["dataset"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown plan field(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["models"] = list(self.models)
        d["attacks"] = list(self.attacks)
        return d

    def resolved_attack_config(self, kind):
        """Attack config with defaults filled in and a plan-derived seed when unset."""
        raw = dict(self.attack_configs.get(kind, {}))
        cls = CONFIG_TYPES[kind]
        if "seed" in cls.__dataclass_fields__ and "seed" not in raw:
            raw["seed"] = derive_seed(self.seed, f"attack/{kind}")
        return cls(**raw)


def load_plan(path) -> ExperimentPlan:
    return ExperimentPlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def derive_seed(seed, label):
    """Stable 63-bit seed for a named pipeline stage."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

class ExperimentError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


@contextmanager
def _stage(name):
    log.info("stage %s", name)
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc


@dataclass
class Cell:
    model: str
    attack: str
    report: EvalReport
    attack_summary: Optional[dict] = None
    attack_result: Optional[AttackResult] = field(default=None, repr=False)
    baseline_macro_f1: Optional[float] = None


@dataclass
class ExperimentResult:
    dataset: str
    class_names: tuple
    cells: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    adversarial_sets: dict = field(default_factory=dict, repr=False)
    complete: bool = False

    def cell(self, model, attack):
        for c in self.cells:
            if c.model == model and c.attack == attack:
                return c
        raise KeyError((model, attack))

    @property
    def flags(self):
        return qualitative_flags(self)


def qualitative_flags(result: ExperimentResult):
    """Cells where an attack failed to strictly lower macro F1 below clean."""
    out = []
    for c in result.cells:
        if c.attack == "none" or c.baseline_macro_f1 is None:
            continue
        if not c.report.macro_f1 < c.baseline_macro_f1:
            out.append(
                f"{result.dataset}/{c.model}/{c.attack}: macro F1 {c.report.macro_f1:.6f} "
                f"not below clean {c.baseline_macro_f1:.6f}"
            )
    return out


def run_experiment(plan: ExperimentPlan, out_dir=None, base_dir=None,
                   workers=None) -> ExperimentResult:
    """Run the clean evaluation and, if attacks are listed, the adversarial one.

    When ``out_dir`` is given the manifest, metrics CSV, JSON report and
    adversarial sets are written there. If a stage fails, whatever finished
    is written with a ``.partial`` suffix and :class:`ExperimentError` is
    raised naming the stage.
    """
    result = ExperimentResult(plan.dataset.display_name, ())
    manifest = {
        "format": "trafficbench-manifest",
        "version": 1,
        "package_version": trafficbench.__version__,
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
        "plan": plan.to_dict(),
        "seeds": {"split": plan.seed},
    }
    result.manifest = manifest
    try:
        _run(plan, result, manifest, base_dir, workers)
        result.complete = True
    except ExperimentError as exc:
        manifest["failure"] = {"stage": exc.stage, "error": str(exc.cause)}
        if out_dir is not None:
            write_outputs(result, out_dir, plan, partial=True)
        raise
    if out_dir is not None:
        write_outputs(result, out_dir, plan)
    return result


def _run(plan, result, manifest, base_dir, workers):
    with _stage("ingest"):
        data = plan.dataset.load(base_dir)
        result.class_names = data.schema.class_names
        manifest["dataset"] = {
            "name": result.dataset,
            "fingerprint": data.fingerprint(),
            "n_samples": data.n_samples,
            "n_features": data.n_features,
            "feature_names": list(data.schema.feature_names),
            "class_names": list(data.schema.class_names),
            "class_counts": data.class_counts().tolist(),
            "dropped_rows": data.dropped_rows,
        }
    with _stage("split"):
        spec = SplitSpec(plan.train_fraction, plan.seed, plan.stratified)
        tr_idx, te_idx = split_indices(data, spec)
        train, test = data.subset(tr_idx), data.subset(te_idx)
        manifest["split"] = {
            "train_fraction": plan.train_fraction,
            "stratified": plan.stratified,
            "n_train": int(tr_idx.size),
            "n_test": int(te_idx.size),
            "train_fingerprint": train.fingerprint(),
            "test_fingerprint": test.fingerprint(),
        }
    with _stage("scale"):
        scaler = fit_scaler(train)
        train, test = apply_scaler(train, scaler), apply_scaler(test, scaler)
        manifest["scaler"] = scaler.to_dict()
    with _stage("rank-features"):
        ranking = rank_features(train, plan.bins)
        k = min(plan.k_features, train.n_features)
        train, test = select_top_k(train, ranking, k), select_top_k(test, ranking, k)
        manifest["ranking"] = [
            {"feature_index": i, "feature_name": data.schema.feature_names[i], "mi_nats": mi}
            for i, mi in ranking.entries
        ]
        manifest["selected_features"] = list(train.schema.feature_names)

    attacked = test
    if plan.max_attack_samples is not None and plan.max_attack_samples < test.n_samples:
        rng = np.random.default_rng(derive_seed(plan.seed, "attack-subset"))
        rows = np.sort(rng.permutation(test.n_samples)[:plan.max_attack_samples])
        attacked = test.subset(rows)
        manifest["attack_subset"] = rows.tolist()

    manifest["models"] = {}
    for kind in plan.models:
        mseed = derive_seed(plan.seed, f"model/{kind}")
        cfg = replace(plan.train, seed=mseed)
        with _stage(f"train:{kind}"):
            model = train_model(kind, train, cfg, plan.knn_k, plan.min_leaf)
        entry = {"seed": mseed, "hyperparameters": model.hyperparameters()}
        if getattr(model, "history", None):
            entry["train_loss"] = list(model.history)
        manifest["models"][kind] = entry
        with _stage(f"evaluate:{kind}"):
            clean = metrics(confusion(model, test), plan.average)
            result.cells.append(Cell(kind, "none", clean))
            baseline = (clean.macro_f1 if attacked is test
                        else metrics(confusion(model, attacked), plan.average).macro_f1)
        surrogate = None
        for attack in plan.attacks[1:]:
            acfg = plan.resolved_attack_config(attack)
            if attack in ("pgd", "deepfool") and not model.differentiable and surrogate is None:
                sseed = derive_seed(plan.seed, f"surrogate/{kind}")
                with _stage(f"surrogate:{kind}"):
                    surrogate = train_surrogate(model, train, replace(plan.train, seed=sseed))
                entry["surrogate"] = {"seed": sseed, "agreement": surrogate.agreement,
                                      "warnings": list(surrogate.warnings)}
            with _stage(f"attack:{kind}:{attack}"):
                res = run_attack(attack, model, attacked, acfg, surrogate, workers=workers)
                adv = attacked.with_features(res.adversarial)
                report = metrics(confusion(model, adv), plan.average)
                summary = res.summary()
                summary["config"] = asdict(acfg)
                result.cells.append(Cell(kind, attack, report, summary, res, baseline))
                result.adversarial_sets[(kind, attack)] = adv
    manifest["flags"] = qualitative_flags(result)
    for flag in manifest["flags"]:
        log.warning("qualitative check: %s", flag)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _fmt(v):
    return f"{v:.6f}"


def metrics_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in result.cells:
        for name, (p, r, f) in zip(result.class_names, c.report.per_class):
            w.writerow([result.dataset, c.model, c.attack, name, _fmt(p), _fmt(r), _fmt(f)])
        rep = c.report
        w.writerow([result.dataset, c.model, c.attack, MACRO, _fmt(rep.macro_precision),
                    _fmt(rep.macro_recall), _fmt(rep.macro_f1)])
    return buf.getvalue()


def _round6(obj):
    if isinstance(obj, float):
        return float(_fmt(obj))
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round6(v) for v in obj]
    return obj


def report_json(result: ExperimentResult) -> str:
    doc = {
        "dataset": result.dataset,
        "class_names": list(result.class_names),
        "complete": result.complete,
        "results": [
            {
                "model": c.model,
                "attack": c.attack,
                "report": _round6(c.report.to_dict()),
                "attack_summary": _round6(c.attack_summary) if c.attack_summary else None,
            }
            for c in result.cells
        ],
        "flags": qualitative_flags(result),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_report_json(text):
    """Inverse of :func:`report_json`: ``[(model, attack, EvalReport), ...]``."""
    doc = json.loads(text)
    return [(r["model"], r["attack"], EvalReport.from_dict(r["report"])) for r in doc["results"]]


def emit_report(result: ExperimentResult, out_dir, fmt="csv", partial=False):
    """Write ``metrics.csv`` or ``report.json`` under ``out_dir``; returns the path."""
    if not result.cells and not partial:
        raise ValueError("no results to report")
    if fmt == "csv":
        name, text = "metrics.csv", metrics_csv(result)
    elif fmt == "json":
        name, text = "report.json", report_json(result)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(out_dir) / name
    if partial:
        path = path.with_name(path.name + _atomic.PARTIAL_SUFFIX)
    try:
        _atomic.write_text(path, text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def manifest_json(manifest) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def write_outputs(result: ExperimentResult, out_dir, plan: ExperimentPlan, partial=False):
    out = Path(out_dir)
    suffix = _atomic.PARTIAL_SUFFIX if partial else ""
    _atomic.write_text(out / f"manifest.json{suffix}", manifest_json(result.manifest))
    emit_report(result, out, "csv", partial)
    emit_report(result, out, "json", partial)
    if plan.save_adversarial and not partial:
        for c in result.cells:
            if c.attack_result is not None:
                adv = result.adversarial_sets[(c.model, c.attack)]
                c.attack_result.save(out / "adv" / f"{c.model}_{c.attack}", adv)
