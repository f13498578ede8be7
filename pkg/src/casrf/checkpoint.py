"""Flat binary container for named parameter tensors.

Layout (all integers little-endian u32):

    8 bytes   magic b"CRFCKPT1"
    u32       format version (currently 1)
    u32       tensor count
    repeated per tensor, in sorted-name order:
        u32       byte length of the UTF-8 name
        bytes     name
        u32       rank
        u32 * r   dims
        f64 * n   payload, little-endian, C order

Values are always stored as float64 regardless of the in-memory dtype.
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

from .errors import CheckpointError

MAGIC = b"CRFCKPT1"
VERSION = 1


def save_checkpoint(path, tensors: Dict[str, np.ndarray]) -> None:
    """Write a name -> array mapping; names are sorted for determinism."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        # tobytes() always serializes C order; asarray keeps 0-d ranks intact
        arr = np.asarray(tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: Dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        piece = blob[off: off + n]
        off += n
        return piece

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = 1
        for d in dims:
            n *= d
        payload = take(8 * n)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return out
