"""JSON parameter checkpoints: ``{name: {"shape": [...], "values": [...]}}``.

Python's float repr round-trips exactly, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor

FORMAT = "preaa-checkpoint/1"


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    entries = {}
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        entries[name] = {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}
    doc = {"format": FORMAT, "meta": meta or {}, "tensors": entries}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    out = {}
    for name, entry in doc["tensors"].items():
        out[name] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
    return out, doc.get("meta", {})
