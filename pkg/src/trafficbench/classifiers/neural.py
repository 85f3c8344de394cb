"""Float64 numpy networks (MLP, 1-D CNN, stacked simple RNN) with manual backprop.

Every network maps an ``(N, D)`` batch to ``(N, C)`` logits. The CNN and RNN
read the ``D`` features as a length-``D`` sequence with one channel. The
backward pass yields parameter gradients (for SGD) and input gradients (for
the attacks) from the same code path.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from trafficbench.classifiers.base import Classifier

log = logging.getLogger(__name__)

NEURAL_KINDS = ("mlp", "cnn1d", "rnn")
DEFAULT_HIDDEN = {"mlp": (180, 160), "cnn1d": (84, 64), "rnn": (84, 64)}
KERNEL_SIZE = 3


class NeuralTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.01
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def param_layout(kind, n_features, n_classes, hidden, kernel_size=KERNEL_SIZE):
    """Ordered ``(name, shape, fan_in, fan_out)``; ``fan_in=None`` marks a zero-init bias."""
    layout = []
    D, C = n_features, n_classes
    if kind == "mlp":
        fin = D
        for i, h in enumerate(hidden):
            layout += [(f"dense{i}.W", (fin, h), fin, h), (f"dense{i}.b", (h,), None, None)]
            fin = h
        layout += [("out.W", (fin, C), fin, C), ("out.b", (C,), None, None)]
    elif kind == "cnn1d":
        cin = 1
        for i, h in enumerate(hidden):
            k = kernel_size
            layout += [(f"conv{i}.W", (k, cin, h), k * cin, k * h), (f"conv{i}.b", (h,), None, None)]
            cin = h
        fin = D * cin
        layout += [("out.W", (fin, C), fin, C), ("out.b", (C,), None, None)]
    elif kind == "rnn":
        fin = 1
        for i, h in enumerate(hidden):
            layout += [
                (f"rnn{i}.Wx", (fin, h), fin, h),
                (f"rnn{i}.Wh", (h, h), h, h),
                (f"rnn{i}.b", (h,), None, None),
            ]
            fin = h
        layout += [("out.W", (fin, C), fin, C), ("out.b", (C,), None, None)]
    else:
        raise ValueError(f"unknown neural kind {kind!r}")
    return layout


class NeuralModel(Classifier):
    differentiable = True

    def __init__(self, kind, n_features, n_classes, hidden=None, params=None,
                 kernel_size=KERNEL_SIZE):
        if kind not in NEURAL_KINDS:
            raise ValueError(f"unknown neural kind {kind!r}")
        self.kind = kind
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.hidden = tuple(DEFAULT_HIDDEN[kind] if hidden is None else hidden)
        self.kernel_size = int(kernel_size)
        if kind == "cnn1d" and self.n_features < self.kernel_size:
            raise ValueError(
                f"cnn1d needs at least {self.kernel_size} features, got {self.n_features}"
            )
        if kind != "mlp" and not self.hidden:
            raise ValueError(f"{kind} needs at least one hidden layer")
        self.layout = param_layout(kind, self.n_features, self.n_classes, self.hidden,
                                   self.kernel_size)
        self.params = {}
        if params is not None:
            for name, shape, _, _ in self.layout:
                arr = np.array(params[name], dtype=np.float64)
                if arr.shape != shape:
                    raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
                self.params[name] = arr
        self.history = []

    def init_params(self, seed):
        rng = np.random.default_rng(int(seed))
        for name, shape, fan_in, fan_out in self.layout:
            if fan_in is None:
                self.params[name] = np.zeros(shape)
            else:
                self.params[name] = _glorot(rng, shape, fan_in, fan_out)
        return self

    def tensors(self):
        return {name: self.params[name] for name, *_ in self.layout}

    def hyperparameters(self):
        return {"hidden": list(self.hidden), "kernel_size": self.kernel_size}

    # -- forward / backward -------------------------------------------------

    def forward(self, X):
        """Logits and the cache needed by :meth:`backward`."""
        return getattr(self, f"_forward_{self.kind}")(X)

    def backward(self, cache, dlogits):
        """Parameter gradients and input gradient given dLoss/dLogits."""
        return getattr(self, f"_backward_{self.kind}")(cache, dlogits)

    def _forward_mlp(self, X):
        p = self.params
        h, stack = X, []
        for i in range(len(self.hidden)):
            z = h @ p[f"dense{i}.W"] + p[f"dense{i}.b"]
            stack.append((h, z))
            h = np.maximum(z, 0.0)
        return h @ p["out.W"] + p["out.b"], (stack, h)

    def _backward_mlp(self, cache, dlogits):
        p = self.params
        stack, h = cache
        g = {"out.W": h.T @ dlogits, "out.b": dlogits.sum(axis=0)}
        dh = dlogits @ p["out.W"].T
        for i in reversed(range(len(self.hidden))):
            hin, z = stack[i]
            dz = dh * (z > 0)
            g[f"dense{i}.W"] = hin.T @ dz
            g[f"dense{i}.b"] = dz.sum(axis=0)
            dh = dz @ p[f"dense{i}.W"].T
        return g, dh

    def _forward_cnn1d(self, X):
        p = self.params
        B, L = X.shape
        k = self.kernel_size
        pad = k // 2
        h = X[:, :, None]
        stack = []
        for i in range(len(self.hidden)):
            W = p[f"conv{i}.W"]
            cin, cout = W.shape[1], W.shape[2]
            hp = np.pad(h, ((0, 0), (pad, k - 1 - pad), (0, 0)))
            cols = np.stack([hp[:, j:j + L, :] for j in range(k)], axis=2)  # B,L,k,cin
            cols2 = cols.reshape(B * L, k * cin)
            z = (cols2 @ W.reshape(k * cin, cout)).reshape(B, L, cout) + p[f"conv{i}.b"]
            stack.append((cols2, z, cin))
            h = np.maximum(z, 0.0)
        flat = h.reshape(B, -1)
        return flat @ p["out.W"] + p["out.b"], (stack, flat, B, L)

    def _backward_cnn1d(self, cache, dlogits):
        p = self.params
        stack, flat, B, L = cache
        k = self.kernel_size
        pad = k // 2
        g = {"out.W": flat.T @ dlogits, "out.b": dlogits.sum(axis=0)}
        dh = (dlogits @ p["out.W"].T).reshape(B, L, -1)
        for i in reversed(range(len(self.hidden))):
            cols2, z, cin = stack[i]
            W = p[f"conv{i}.W"]
            cout = W.shape[2]
            dz = (dh * (z > 0)).reshape(B * L, cout)
            g[f"conv{i}.W"] = (cols2.T @ dz).reshape(W.shape)
            g[f"conv{i}.b"] = dz.sum(axis=0)
            dcols = (dz @ W.reshape(k * cin, cout).T).reshape(B, L, k, cin)
            dhp = np.zeros((B, L + k - 1, cin))
            for j in range(k):
                dhp[:, j:j + L, :] += dcols[:, :, j, :]
            dh = dhp[:, pad:pad + L, :]
        return g, dh[:, :, 0]

    def _forward_rnn(self, X):
        p = self.params
        B, L = X.shape
        seq = X[:, :, None]
        stack = []
        for i, hdim in enumerate(self.hidden):
            Wx, Wh, b = p[f"rnn{i}.Wx"], p[f"rnn{i}.Wh"], p[f"rnn{i}.b"]
            hs = np.empty((B, L, hdim))
            hprev = np.zeros((B, hdim))
            xin = seq @ Wx  # B,L,h
            for t in range(L):
                hprev = np.tanh(xin[:, t] + hprev @ Wh + b)
                hs[:, t] = hprev
            stack.append((seq, hs))
            seq = hs
        last = seq[:, -1]
        return last @ p["out.W"] + p["out.b"], (stack, last)

    def _backward_rnn(self, cache, dlogits):
        p = self.params
        stack, last = cache
        g = {"out.W": last.T @ dlogits, "out.b": dlogits.sum(axis=0)}
        B, L, _ = stack[-1][1].shape
        dseq = np.zeros_like(stack[-1][1])
        dseq[:, -1] = dlogits @ p["out.W"].T
        for i in reversed(range(len(self.hidden))):
            seq_in, hs = stack[i]
            Wx, Wh = p[f"rnn{i}.Wx"], p[f"rnn{i}.Wh"]
            gWx, gWh = np.zeros_like(Wx), np.zeros_like(Wh)
            gb = np.zeros(Wh.shape[0])
            dx = np.empty(seq_in.shape)
            dnext = np.zeros((B, Wh.shape[0]))
            for t in reversed(range(L)):
                da = (dseq[:, t] + dnext) * (1.0 - hs[:, t] ** 2)
                hprev = hs[:, t - 1] if t > 0 else np.zeros_like(hs[:, 0])
                gWx += seq_in[:, t].T @ da
                gWh += hprev.T @ da
                gb += da.sum(axis=0)
                dx[:, t] = da @ Wx.T
                dnext = da @ Wh.T
            g[f"rnn{i}.Wx"], g[f"rnn{i}.Wh"], g[f"rnn{i}.b"] = gWx, gWh, gb
            dseq = dx
        return g, dseq[:, :, 0]

    # -- query surface ------------------------------------------------------

    def logits(self, X):
        return self.forward(self._check(X))[0]

    def _proba(self, X):
        return softmax(self.forward(X)[0])

    def logit_jacobian(self, X):
        """``(N, C, D)`` Jacobian of the logits w.r.t. each input row."""
        X = self._check(X)
        _, cache = self.forward(X)
        J = np.empty((X.shape[0], self.n_classes, self.n_features))
        for c in range(self.n_classes):
            onehot = np.zeros((X.shape[0], self.n_classes))
            onehot[:, c] = 1.0
            J[:, c] = self.backward(cache, onehot)[1]
        return J

    def loss_grad(self, X, y):
        """Per-row gradient of the cross-entropy loss w.r.t. the input, ``(N, D)``."""
        X = self._check(X)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        logits, cache = self.forward(X)
        d = softmax(logits)
        d[np.arange(X.shape[0]), y] -= 1.0
        return self.backward(cache, d)[1]

    def loss(self, X, y):
        X = self._check(X)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        lp = log_softmax(self.forward(X)[0])
        return float(-lp[np.arange(X.shape[0]), y].mean())

    def copy(self):
        m = NeuralModel(self.kind, self.n_features, self.n_classes, self.hidden,
                        {k: v.copy() for k, v in self.params.items()}, self.kernel_size)
        m.history = list(self.history)
        return m


def sgd_fit(model: NeuralModel, X, y, cfg: TrainConfig, rng=None):
    """Mini-batch SGD on mean cross-entropy; mutates ``model`` in place.

    Appends each epoch's mean training loss to ``model.history``.
    """
    rng = rng if rng is not None else np.random.default_rng(int(cfg.seed))
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            logits, cache = model.forward(xb)
            lp = log_softmax(logits)
            loss = -lp[np.arange(idx.size), yb].mean()
            if not np.isfinite(loss):
                raise NeuralTrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi} ({model.kind})"
                )
            total += loss * idx.size
            d = np.exp(lp)
            d[np.arange(idx.size), yb] -= 1.0
            grads, _ = model.backward(cache, d / idx.size)
            for name, gval in grads.items():
                model.params[name] -= cfg.learning_rate * gval
        model.history.append(total / n)
        log.debug("%s epoch %d loss %.6f", model.kind, epoch, model.history[-1])
    return model


def train_neural(train, kind: str, cfg: TrainConfig = TrainConfig(), hidden=None) -> NeuralModel:
    """Train one of the three network families on a Dataset.

    Initialisation and shuffling both derive from ``cfg.seed``, so identical
    inputs give bit-identical parameters.
    """
    rng = np.random.default_rng(int(cfg.seed))
    model = NeuralModel(kind, train.n_features, train.n_classes, hidden)
    model.init_params(rng.integers(0, 2**63))
    return sgd_fit(model, train.features, train.labels, cfg, rng)
