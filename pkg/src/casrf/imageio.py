"""Minimal binary image / depth / point-cloud IO.

Images travel through the pipeline as float arrays in [0, 1] with shape
[3, H, W].  On disk: PPM (P6) for color, PGM (P5) for masks, PFM for float
maps, ASCII PLY for point clouds.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import DataError


def save_ppm(path, img: np.ndarray) -> None:
    """img [3, H, W] floats in [0,1] -> binary P6 with rounding."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError("expected [3, H, W] image")
    h, w = img.shape[1:]
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.transpose(1, 2, 0).tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise DataError(f"{path}: not a binary PPM")
    w, h, maxv = (int(m.group(i)) for i in (1, 2, 3))
    if maxv != 255:
        raise DataError(f"{path}: only 8-bit PPM supported")
    data = blob[m.end():]
    if len(data) < 3 * w * h:
        raise DataError(f"{path}: truncated PPM payload")
    arr = np.frombuffer(data[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_pgm(path, mask: np.ndarray) -> None:
    """Boolean or [0,1] float mask [H, W] -> binary P5 (0 or 255)."""
    if mask.ndim != 2:
        raise DataError("expected [H, W] mask")
    h, w = mask.shape
    q = np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(q.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxv = (int(m.group(i)) for i in (1, 2, 3))
    data = blob[m.end():]
    if len(data) < w * h:
        raise DataError(f"{path}: truncated PGM payload")
    arr = np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)
    return arr > (maxv // 2)


def save_pfm(path, data: np.ndarray) -> None:
    """Grayscale float map [H, W], little-endian, bottom-up scanlines."""
    if data.ndim != 2:
        raise DataError("expected [H, W] float map")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        f.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", blob)
    if not m:
        raise DataError(f"{path}: not a PFM")
    kind = m.group(1)
    if kind != b"Pf":
        raise DataError(f"{path}: only grayscale PFM supported")
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(blob[m.end():m.end() + 4 * w * h], dtype=dtype)
    if data.size != w * h:
        raise DataError(f"{path}: truncated PFM payload")
    return np.flipud(data.reshape(h, w)).astype(np.float64)


def save_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY: points [N, 3] float, colors [N, 3] in [0,1]."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DataError("expected [N, 3] points")
    cq = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    if cq.shape != points.shape:
        raise DataError("colors must match points")
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    for p, c in zip(points, cq):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}")
    lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))


def load_ply(path):
    """Returns (points [N, 3] float64, colors [N, 3] float in [0,1])."""
    with open(path) as f:
        text = f.read()
    lines = text.splitlines()
    try:
        n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
        start = next(i for i, l in enumerate(lines) if l.strip() == "end_header") + 1
    except StopIteration:
        raise DataError(f"{path}: malformed PLY header") from None
    rows = [l.split() for l in lines[start:start + n]]
    if len(rows) != n:
        raise DataError(f"{path}: expected {n} vertices")
    arr = np.array([[float(x) for x in r[:3]] for r in rows])
    col = np.array([[int(x) for x in r[3:6]] for r in rows], dtype=np.float64) / 255.0
    return arr, col
