"""Atomic file output: write to ``<path>.partial`` then rename into place."""

import os
from contextlib import contextmanager
from pathlib import Path

PARTIAL_SUFFIX = ".partial"


@contextmanager
def atomic_open(path, mode="w", **kwargs):
    """Open ``path`` for writing through a ``.partial`` sibling.

    On success the partial file is renamed over ``path``. If the body
    raises, the ``.partial`` file is left behind so that a failed run never
    leaves a truncated file under the final name.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + PARTIAL_SUFFIX)
    if "b" not in mode:
        kwargs.setdefault("encoding", "utf-8")
        kwargs.setdefault("newline", "")
    with open(tmp, mode, **kwargs) as fh:
        yield fh
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_text(path, text):
    with atomic_open(path, "w") as fh:
        fh.write(text)


def write_bytes(path, data):
    with atomic_open(path, "wb") as fh:
        fh.write(data)
