"""Named-tensor checkpoints: ``.npz`` arrays plus a JSON metadata file."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["save_tensors", "load_tensors"]


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    """Write ``<path>.npz`` and ``<path>.json``; returns the npz path."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix == ".npz" else path
    base.parent.mkdir(parents=True, exist_ok=True)
    npz = base.with_suffix(".npz")
    np.savez(npz, **{k: np.asarray(v) for k, v in tensors.items()})
    meta = dict(metadata or {})
    meta["tensors"] = {k: list(np.shape(v)) for k, v in tensors.items()}
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return npz


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
    with np.load(base.with_suffix(".npz")) as data:
        tensors = {k: data[k].copy() for k in data.files}
    meta_path = base.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return tensors, meta
