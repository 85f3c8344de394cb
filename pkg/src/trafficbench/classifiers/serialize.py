"""Model container: a ZIP archive of ``.npy`` tensors plus a JSON header.

Layout (all members stored uncompressed, timestamps fixed to 1980-01-01 so
identical models give identical bytes):

``meta.json``
    UTF-8 JSON object with keys ``format`` (``"trafficbench-model"``),
    ``version`` (``1``), ``kind`` (``c45|knn|mlp|cnn1d|rnn``), ``n_features``,
    ``n_classes``, ``hyperparameters``, ``schema`` (feature/class names or
    ``null``), ``schema_fingerprint`` and ``tensors`` (member names in order).
``tensors/<name>.npy``
    One NumPy ``.npy`` v1 file per tensor: little-endian ``<f8`` for real
    tensors, ``<i8`` for integer ones, C (row-major) order.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from trafficbench import _atomic
from trafficbench.classifiers.knn import KnnModel
from trafficbench.classifiers.neural import NEURAL_KINDS, NeuralModel
from trafficbench.classifiers.tree import TreeModel
from trafficbench.flowdata import FeatureSchema

FORMAT = "trafficbench-model"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _le(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind in "iu":
        return np.ascontiguousarray(arr, dtype="<i8")
    return np.ascontiguousarray(arr, dtype="<f8")


def _member(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def dumps_model(model, schema: FeatureSchema | None = None) -> bytes:
    tensors = model.tensors()
    names = list(tensors)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "hyperparameters": model.hyperparameters(),
        "schema": schema.to_dict() if schema is not None else None,
        "schema_fingerprint": schema.fingerprint() if schema is not None else None,
        "tensors": names,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=2).encode())
        for name in names:
            npy = io.BytesIO()
            np.lib.format.write_array(npy, _le(tensors[name]), allow_pickle=False)
            _member(zf, f"tensors/{name}.npy", npy.getvalue())
    return buf.getvalue()


def loads_model(data: bytes):
    """Inverse of :func:`dumps_model`; returns ``(model, schema_or_None)``."""
    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        meta = json.loads(zf.read("meta.json").decode())
        if meta.get("format") != FORMAT:
            raise ValueError("not a trafficbench model file")
        if meta.get("version") != VERSION:
            raise ValueError(f"unsupported model version {meta.get('version')}")
        tensors = {}
        for name in meta["tensors"]:
            with zf.open(f"tensors/{name}.npy") as fh:
                tensors[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    kind, hp = meta["kind"], meta["hyperparameters"]
    if kind == "c45":
        model = TreeModel(tensors["feature"], tensors["threshold"], tensors["left"],
                          tensors["right"], tensors["value"], meta["n_features"], hp["min_leaf"])
    elif kind == "knn":
        model = KnnModel(tensors["X"], tensors["y"], hp["k"], hp["n_classes"])
    elif kind in NEURAL_KINDS:
        model = NeuralModel(kind, meta["n_features"], meta["n_classes"], hp["hidden"],
                            tensors, hp["kernel_size"])
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    schema = FeatureSchema.from_dict(meta["schema"]) if meta["schema"] else None
    return model, schema


def save_model(model, path, schema: FeatureSchema | None = None):
    _atomic.write_bytes(path, dumps_model(model, schema))


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())
