"""Manifest + raw float32 tensor files, shared by classifier and explainer checkpoints."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datagen import _write_atomic_dir

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _file_name(name):
    return name.replace("/", "_") + ".bin"


def save_checkpoint(directory, manifest_name, meta, tensors):
    """Write ``meta`` plus a tensor table to ``manifest_name`` and one
    little-endian float32 file per entry of ``tensors`` (name -> array)."""
    def write(tmp):
        table = []
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            fname = _file_name(name)
            np.ascontiguousarray(arr, dtype="<f4").tofile(tmp / fname)
            table.append({"tensor_name": name, "shape": list(arr.shape), "file": fname})
        doc = {"format_version": FORMAT_VERSION, **meta, "tensors": table}
        (tmp / manifest_name).write_text(json.dumps(doc, indent=1, sort_keys=True))

    return _write_atomic_dir(directory, write)


def load_checkpoint(directory, manifest_name):
    directory = Path(directory)
    path = directory / manifest_name
    if not path.exists():
        raise CheckpointError(f"missing {manifest_name} in {directory}")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"format_version mismatch: {doc.get('format_version')} != {FORMAT_VERSION}")
    tensors = {}
    for entry in doc["tensors"]:
        name, shape, fname = entry["tensor_name"], tuple(entry["shape"]), entry["file"]
        fpath = directory / fname
        if not fpath.exists():
            raise CheckpointError(f"tensor {name!r}: missing file {fname}")
        raw = fpath.read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise CheckpointError(
                f"tensor {name!r}: byte count mismatch ({len(raw)} bytes, expected {expected})")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return doc, tensors


def round_to_float32(params):
    """Snap parameter values onto float32 so a save/load round trip is exact."""
    for p in params:
        p.data = p.data.astype(np.float32).astype(np.float64)
