"""Checkpoint files: ``<stem>.json`` manifest + ``<stem>.bin`` little-endian float32 blob.

The manifest lists tensors in blob order::

    {"format": "quadftc-ckpt", "version": 1,
     "tensors": [{"name": "pi0.w", "shape": [30, 128]}, ...],
     "meta": {...}}
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "quadftc-ckpt"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def to_bytes(tensors: dict) -> bytes:
    return b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())


def save(stem, tensors: dict, meta: dict | None = None) -> Path:
    man_path, bin_path = _paths(stem)
    man_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
        "meta": meta or {},
    }
    bin_path.write_bytes(to_bytes(tensors))
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=False))
    return man_path


def load(stem) -> tuple[dict, dict]:
    man_path, bin_path = _paths(stem)
    if not man_path.exists() or not bin_path.exists():
        raise FileNotFoundError(f"checkpoint {man_path} / {bin_path} not found")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{man_path}: unsupported checkpoint format")
    blob = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    out, off = {}, 0
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if off + n > blob.size:
            raise CheckpointError(f"{bin_path}: blob too short for {t['name']}")
        out[t["name"]] = blob[off: off + n].reshape(t["shape"]).astype(np.float32)
        off += n
    if off != blob.size:
        raise CheckpointError(f"{bin_path}: {blob.size - off} trailing values")
    return out, manifest.get("meta", {})


def content_hash(stem) -> str:
    """git-style blob sha1 over manifest tensor list and blob bytes."""
    man_path, bin_path = _paths(stem)
    tensors = json.loads(man_path.read_text())["tensors"]
    data = json.dumps(tensors, sort_keys=True).encode() + bin_path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
