"""White-box evasion attacks: PGD, DeepFool, and query-only ZOO.

All attacks are untargeted: a sample counts as a success when the model's
predicted label at the adversarial point differs from its prediction at the
clean point. Attacks work in the scaled feature space and never modify their
inputs. Per-sample randomness comes from ``seed ^ sample_index``, so sharding
samples across workers reproduces the sequential result.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from trafficbench import _atomic
from trafficbench.classifiers import NeuralModel, NotDifferentiableError, TrainConfig
from trafficbench.classifiers.neural import sgd_fit
from trafficbench.flowdata import load_dataset, save_dataset

log = logging.getLogger(__name__)

ATTACK_KINDS = ("zoo", "pgd", "deepfool")
DEGENERATE_NORM = 1e-12
DEEPFOOL_KICK = 1e-4
_LOG_FLOOR = 1e-30
SURROGATE_MIN_AGREEMENT = 0.60
ATTACK_BLOCK = 32


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 0.3
    alpha: float = 0.05
    iterations: int = 40
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.epsilon > 0 and self.alpha > self.epsilon:
            raise ValueError("alpha must not exceed epsilon")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class DeepFoolConfig:
    max_iterations: int = 50
    overshoot: float = 0.02

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")


@dataclass(frozen=True)
class ZooConfig:
    h: float = 1e-4
    step_size: float = 0.01
    iterations: int = 200
    coords_per_iter: int = 1
    confidence_kappa: float = 0.0
    seed: int = 0
    # Optional L-inf radius; None leaves the search unconstrained.
    epsilon: Optional[float] = None

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.coords_per_iter < 1:
            raise ValueError("coords_per_iter must be >= 1")
        if self.confidence_kappa < 0:
            raise ValueError("confidence_kappa must be >= 0")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


CONFIG_TYPES = {"pgd": PgdConfig, "deepfool": DeepFoolConfig, "zoo": ZooConfig}


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: np.ndarray
    linf_norms: np.ndarray
    l2_norms: np.ndarray
    queries: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.adversarial.shape[0]

    def success_rate(self, mask=None):
        s = self.success if mask is None else self.success[mask]
        return float(s.mean()) if s.size else 0.0

    def summary(self):
        return {
            "attack": self.metadata.get("attack"),
            "n_samples": int(self.n_samples),
            "success_rate": self.success_rate(),
            "mean_linf": float(self.linf_norms.mean()),
            "max_linf": float(self.linf_norms.max()),
            "mean_l2": float(self.l2_norms.mean()),
            "mean_queries": float(self.queries.mean()),
            "warnings": list(self.metadata.get("warnings", [])),
        }

    def save(self, directory, dataset):
        """Write the adversarial set and per-sample metadata under ``directory``.

        ``adversarial.csv`` is the canonical dataset CSV of ``dataset`` with
        its features replaced by the adversarial matrix (plus schema sidecar);
        ``samples.jsonl`` holds one JSON object per row; ``attack.json`` the
        attack metadata.
        """
        directory = Path(directory)
        save_dataset(dataset.with_features(self.adversarial), directory / "adversarial.csv")
        lines = []
        for i in range(self.n_samples):
            lines.append(json.dumps({
                "index": i,
                "success": bool(self.success[i]),
                "linf": float(self.linf_norms[i]),
                "l2": float(self.l2_norms[i]),
                "queries": int(self.queries[i]),
                "clean_pred": int(self.clean_pred[i]),
                "adv_pred": int(self.adv_pred[i]),
            }, sort_keys=True))
        _atomic.write_text(directory / "samples.jsonl", "\n".join(lines) + "\n")
        _atomic.write_text(directory / "attack.json",
                           json.dumps(_jsonable(self.metadata), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        """Returns ``(AttackResult, adversarial Dataset)``."""
        directory = Path(directory)
        adv = load_dataset(directory / "adversarial.csv")
        recs = [json.loads(line) for line in
                (directory / "samples.jsonl").read_text().splitlines() if line]
        meta_path = directory / "attack.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}

        def col(key, dtype):
            return np.array([r[key] for r in recs], dtype=dtype)

        res = cls(np.array(adv.features), col("success", bool), col("linf", float),
                  col("l2", float), col("queries", np.int64), col("clean_pred", np.int64),
                  col("adv_pred", np.int64), meta)
        return res, adv


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def worker_count(requested=None):
    """Requested worker count capped by ``TRAFFICBENCH_THREADS`` (default 1)."""
    cap = os.environ.get("TRAFFICBENCH_THREADS")
    cap = max(1, int(cap)) if cap else None
    n = requested if requested is not None else (cap or 1)
    return max(1, min(n, cap) if cap else n)


def _sharded(fn, n, workers):
    """Run ``fn(index_array)`` over fixed blocks and concatenate the per-row outputs.

    Blocks do not depend on the worker count: BLAS rounding can change with
    batch shape, so fixing the blocks keeps parallel runs bit-identical to
    sequential ones.
    """
    blocks = [np.arange(s, min(s + ATTACK_BLOCK, n)) for s in range(0, n, ATTACK_BLOCK)]
    workers = min(worker_count(workers), len(blocks))
    if workers <= 1:
        parts = [fn(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, blocks))
    return tuple(np.concatenate(p) for p in zip(*parts))


def _clamp(x, bounds):
    if bounds is None:
        return x
    lo, hi = bounds
    return np.clip(x, lo, hi)


def _finish(model, X, adv, queries, meta, clean_pred=None):
    clean = model.predict(X) if clean_pred is None else clean_pred
    adv_pred = model.predict(adv)
    delta = adv - X
    return AttackResult(
        adversarial=adv,
        success=adv_pred != clean,
        linf_norms=np.abs(delta).max(axis=1),
        l2_norms=np.sqrt((delta ** 2).sum(axis=1)),
        queries=np.asarray(queries, dtype=np.int64),
        clean_pred=clean,
        adv_pred=adv_pred,
        metadata=meta,
    )


def _require_gradients(model, attack):
    if not getattr(model, "differentiable", False):
        raise NotDifferentiableError(
            f"{attack} needs input gradients; {model.kind} models must go through "
            "train_surrogate and a transfer attack"
        )


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------

def attack_pgd(model, data, cfg: PgdConfig = PgdConfig(), bounds=None, workers=None):
    """L-inf projected gradient ascent on the cross-entropy of the true label."""
    _require_gradients(model, "PGD")
    X = np.array(data.features, dtype=np.float64)
    y = data.labels
    eps = cfg.epsilon

    def run(idx):
        x0 = X[idx]
        if cfg.random_start and eps > 0:
            noise = np.stack([np.random.default_rng(int(cfg.seed) ^ int(i)).uniform(-eps, eps, x0.shape[1])
                              for i in idx])
            x = x0 + noise
        else:
            x = x0.copy()
        lo, hi = x0 - eps, x0 + eps
        x = _clamp(np.clip(x, lo, hi), bounds)
        for _ in range(cfg.iterations):
            g = model.loss_grad(x, y[idx])
            x = _clamp(np.clip(x + cfg.alpha * np.sign(g), lo, hi), bounds)
        return (x,)

    (adv,) = _sharded(run, X.shape[0], workers)
    meta = {"attack": "pgd", "config": asdict(cfg)}
    return _finish(model, X, adv, np.zeros(X.shape[0]), meta)


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------

def deepfool_step(f, J, k_hat):
    """One linearised DeepFool step for each row.

    ``f`` is ``(n, C)`` logits, ``J`` the ``(n, C, D)`` logit Jacobian and
    ``k_hat`` the label being moved away from. Returns ``(r, degenerate)``
    where ``r`` is ``(|f'| + kick) / ||w||^2 * w`` for the closest boundary.
    """
    n = f.shape[0]
    rows = np.arange(n)
    w = J - J[rows, k_hat][:, None, :]
    fp = f - f[rows, k_hat][:, None]
    wn = np.sqrt((w ** 2).sum(axis=2))
    mask = np.ones_like(fp, dtype=bool)
    mask[rows, k_hat] = False
    ok = mask & (wn >= DEGENERATE_NORM)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(ok, np.abs(fp) / np.where(ok, wn, 1.0), np.inf)
    degenerate = ~ok.any(axis=1)
    l_star = np.argmin(dist, axis=1)
    w_star = w[rows, l_star]
    wn_star = np.where(degenerate, 1.0, wn[rows, l_star])
    scale = (np.abs(fp[rows, l_star]) + DEEPFOOL_KICK) / wn_star ** 2
    r = np.where(degenerate[:, None], 0.0, scale[:, None] * w_star)
    return r, degenerate


def attack_deepfool(model, data, cfg: DeepFoolConfig = DeepFoolConfig(), bounds=None,
                    workers=None):
    """Iterative minimal-L2 DeepFool; the overshoot-scaled point is both the
    stopping check and the returned adversarial example."""
    _require_gradients(model, "DeepFool")
    X = np.array(data.features, dtype=np.float64)
    if model.n_classes < 2:
        raise ValueError("DeepFool needs at least two classes")
    scale = 1.0 + cfg.overshoot

    def run(idx):
        x0 = X[idx]
        k_hat = model.predict(x0)
        r_tot = np.zeros_like(x0)
        x = x0.copy()
        active = np.ones(idx.size, dtype=bool)
        degenerate = np.zeros(idx.size, dtype=bool)
        iters = np.zeros(idx.size, dtype=np.int64)
        for _ in range(cfg.max_iterations):
            rows = np.flatnonzero(active)
            if rows.size == 0:
                break
            f = model.logits(x[rows])
            J = model.logit_jacobian(x[rows])
            r, degen = deepfool_step(f, J, k_hat[rows])
            degenerate[rows[degen]] = True
            r_tot[rows] += r
            x[rows] = _clamp(x0[rows] + scale * r_tot[rows], bounds)
            iters[rows] += 1
            still = model.predict(x[rows]) == k_hat[rows]
            active[rows] = still & ~degen
        return x, degenerate, iters

    adv, degenerate, iters = _sharded(run, X.shape[0], workers)
    meta = {"attack": "deepfool", "config": asdict(cfg),
            "degenerate": int(degenerate.sum()), "iterations_used": iters.tolist()}
    res = _finish(model, X, adv, np.zeros(X.shape[0]), meta)
    res.success &= ~degenerate
    return res


# ---------------------------------------------------------------------------
# ZOO
# ---------------------------------------------------------------------------

def central_difference(fn, x, h):
    """Symmetric difference quotient ``(fn(x + h) - fn(x - h)) / 2h``."""
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


def margin_loss(proba, k_hat, kappa):
    """``max(ln p_k - max_{l != k} ln p_l, -kappa)`` per row."""
    lp = np.log(np.maximum(proba, _LOG_FLOOR))
    rows = np.arange(lp.shape[0])
    own = lp[rows, k_hat]
    others = lp.copy()
    others[rows, k_hat] = -np.inf
    return np.maximum(own - others.max(axis=1), -kappa)


def _zoo_coordinates(seed, index, iterations, m, d):
    rng = np.random.default_rng(int(seed) ^ int(index))
    if m >= d:
        return np.broadcast_to(np.arange(d), (iterations, d))
    if m == 1:
        return rng.integers(0, d, size=(iterations, 1))
    return rng.permuted(np.tile(np.arange(d), (iterations, 1)), axis=1)[:, :m]


def attack_zoo(model, data, cfg: ZooConfig = ZooConfig(), bounds=None, workers=None):
    """Zeroth-order coordinate descent on the margin loss.

    Only ``model.predict_proba`` is called. Each iteration estimates the
    partial derivative along ``coords_per_iter`` random coordinates from two
    queries each, takes a plain gradient step on them, then spends one query
    checking whether the label has flipped.
    """
    X = np.array(data.features, dtype=np.float64)
    n, d = X.shape
    m = min(cfg.coords_per_iter, d)
    clean_pred = np.argmax(model.predict_proba(X), axis=1)

    def run(idx):
        x0 = X[idx]
        x = x0.copy()
        k_hat = clean_pred[idx]
        coords = np.stack([_zoo_coordinates(cfg.seed, i, cfg.iterations, m, d) for i in idx])
        queries = np.zeros(idx.size, dtype=np.int64)
        active = np.ones(idx.size, dtype=bool)
        for it in range(cfg.iterations):
            rows = np.flatnonzero(active)
            if rows.size == 0:
                break
            na = rows.size
            cidx = coords[rows, it]  # (na, m)
            m_eff = cidx.shape[1]
            base = np.repeat(x[rows], m_eff, axis=0)
            flat_rows = np.arange(na * m_eff)
            flat_cols = cidx.reshape(-1)
            plus, minus = base.copy(), base.copy()
            plus[flat_rows, flat_cols] += cfg.h
            minus[flat_rows, flat_cols] -= cfg.h
            p = model.predict_proba(np.vstack([plus, minus]))
            kk = np.repeat(k_hat[rows], m_eff)
            g_plus = margin_loss(p[:na * m_eff], kk, cfg.confidence_kappa)
            g_minus = margin_loss(p[na * m_eff:], kk, cfg.confidence_kappa)
            ghat = ((g_plus - g_minus) / (2.0 * cfg.h)).reshape(na, m_eff)
            step = np.zeros((na, d))
            np.add.at(step, (np.repeat(np.arange(na), m_eff), flat_cols), -cfg.step_size * ghat.reshape(-1))
            xr = x[rows] + step
            if cfg.epsilon is not None:
                xr = np.clip(xr, x0[rows] - cfg.epsilon, x0[rows] + cfg.epsilon)
            x[rows] = _clamp(xr, bounds)
            pred = np.argmax(model.predict_proba(x[rows]), axis=1)
            queries[rows] += 2 * m_eff + 1
            active[rows] = pred == k_hat[rows]
        return x, queries

    adv, queries = _sharded(run, n, workers)
    adv_pred = np.argmax(model.predict_proba(adv), axis=1)
    delta = adv - X
    return AttackResult(
        adversarial=adv,
        success=adv_pred != clean_pred,
        linf_norms=np.abs(delta).max(axis=1),
        l2_norms=np.sqrt((delta ** 2).sum(axis=1)),
        queries=queries,
        clean_pred=clean_pred,
        adv_pred=adv_pred,
        metadata={"attack": "zoo", "config": asdict(cfg)},
    )


# ---------------------------------------------------------------------------
# Surrogate pathway for trees and KNN
# ---------------------------------------------------------------------------

def train_surrogate(target, train, cfg: TrainConfig = TrainConfig(), hidden=None):
    """Distil ``target``'s predicted labels into an MLP.

    The returned model carries ``agreement`` (fraction of training rows on
    which it matches the target) and ``warnings``.
    """
    labels = target.predict(train.features)
    rng = np.random.default_rng(int(cfg.seed))
    model = NeuralModel("mlp", train.n_features, train.n_classes, hidden)
    model.init_params(rng.integers(0, 2**63))
    sgd_fit(model, train.features, labels, cfg, rng)
    agreement = float((model.predict(train.features) == labels).mean())
    model.agreement = agreement
    model.warnings = []
    if agreement < SURROGATE_MIN_AGREEMENT:
        msg = (f"surrogate agrees with {target.kind} target on only "
               f"{agreement:.1%} of training rows")
        log.warning(msg)
        model.warnings.append(msg)
    return model


def transfer(result: AttackResult, target, clean_X) -> AttackResult:
    """Re-score adversarial examples crafted on a surrogate against ``target``."""
    clean_pred = target.predict(clean_X)
    adv_pred = target.predict(result.adversarial)
    meta = dict(result.metadata)
    meta["transfer_target"] = target.kind
    meta["surrogate_success_rate"] = result.success_rate()
    return AttackResult(result.adversarial, adv_pred != clean_pred, result.linf_norms,
                        result.l2_norms, result.queries, clean_pred, adv_pred, meta)


def run_attack(kind, model, data, cfg=None, surrogate=None, bounds=None, workers=None):
    """Dispatch one attack; gradient attacks on non-differentiable models use ``surrogate``."""
    if kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack {kind!r}; choose from {ATTACK_KINDS}")
    cfg = cfg if cfg is not None else CONFIG_TYPES[kind]()
    if kind == "zoo":
        return attack_zoo(model, data, cfg, bounds, workers)
    fn = attack_pgd if kind == "pgd" else attack_deepfool
    if getattr(model, "differentiable", False):
        return fn(model, data, cfg, bounds, workers)
    if surrogate is None:
        raise NotDifferentiableError(
            f"{kind} on a {model.kind} model needs a surrogate (see train_surrogate)"
        )
    res = transfer(fn(surrogate, data, cfg, bounds, workers), model, data.features)
    res.metadata["surrogate_agreement"] = getattr(surrogate, "agreement", None)
    res.metadata["warnings"] = list(getattr(surrogate, "warnings", []))
    return res
