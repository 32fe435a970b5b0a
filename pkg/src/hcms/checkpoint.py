"""Parameter checkpoints: a JSON header, a sentinel, then raw little-endian float32 tensors."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .dataio import SENTINEL

CHECKPOINT_FORMAT = "hcms-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class DigestMismatch(CheckpointError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_digest: str, meta: dict | None = None) -> None:
    index = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_digest": config_digest,
        "meta": meta or {},
        "tensors": index,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(doc, indent=2).encode("utf-8"))
        f.write(SENTINEL)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path, expect_digest: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``; raise :class:`DigestMismatch` on a foreign config."""
    raw = Path(path).read_bytes()
    cut = raw.find(SENTINEL)
    if cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint (no header sentinel)")
    doc = json.loads(raw[:cut].decode("utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    if expect_digest is not None and doc["config_digest"] != expect_digest:
        raise DigestMismatch(
            f"{path}: checkpoint was produced by config {doc['config_digest'][:12]}, "
            f"current config is {expect_digest[:12]}"
        )
    body = memoryview(raw)[cut + len(SENTINEL) :]
    out = {}
    for rec in doc["tensors"]:
        n = int(np.prod(rec["shape"], dtype=np.int64)) * 4
        start = rec["offset"]
        if start + n > len(body):
            raise CheckpointError(f"{path}: tensor {rec['name']!r} truncated")
        out[rec["name"]] = np.frombuffer(body[start : start + n], dtype="<f4").reshape(rec["shape"]).astype(np.float32)
    return out, doc
