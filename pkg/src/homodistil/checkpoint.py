"""Checkpoint directories: ``manifest.json`` plus one raw ``<f8`` blob per tensor."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

FORMAT = "homodistil-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB_DIR = "tensors"


class CheckpointError(ValueError):
    pass


def _blob_name(name: str) -> str:
    safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in name)
    return f"{safe}.f64"


def save_arrays(directory, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """Write ``arrays`` and ``meta`` to ``directory`` (created if missing).

    Tensor order in the manifest is sorted by name so identical content gives
    byte-identical files.
    """
    d = Path(directory)
    (d / BLOB_DIR).mkdir(parents=True, exist_ok=True)
    index = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        fname = _blob_name(name)
        (d / BLOB_DIR / fname).write_bytes(raw)
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float64-le",
            "file": f"{BLOB_DIR}/{fname}",
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
    manifest = {"format": FORMAT, "version": VERSION, **meta, "tensors": index}
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_arrays(directory, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise CheckpointError(f"no {MANIFEST} in {d}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath} is not a {FORMAT} manifest")
    arrays = {}
    for entry in manifest["tensors"]:
        raw = (d / entry["file"]).read_bytes()
        if verify and hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch for {entry['name']}")
        shape = tuple(entry["shape"])
        arr = np.frombuffer(raw, dtype="<f8")
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{entry['name']}: blob has {arr.size} values, shape {shape}")
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "format", "version")}
    return arrays, meta


def directory_digest(directory) -> str:
    """SHA-256 over every file in a checkpoint directory (names and bytes)."""
    d = Path(directory)
    h = hashlib.sha256()
    for p in sorted(x for x in d.rglob("*") if x.is_file()):
        h.update(str(p.relative_to(d)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
