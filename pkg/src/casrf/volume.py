"""Plane-sweep encoding volumes.

Per level: build a per-pixel grid of depth hypotheses, warp source-view
feature maps onto each hypothesis plane, and aggregate them into a
variance volume that a small 3-D network regularizes into C_v channels.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import cameras as cam
from .autodiff import Tensor
from .errors import EmptyOverlapError, ShapeError, StateError
from .model import ModelConfig
from .sampling import bilinear_sample, footprint_valid


def build_hypotheses(cfg: ModelConfig, level: int, near: float, far: float,
                     height: int, width: int,
                     prev_depth: np.ndarray = None) -> np.ndarray:
    """Per-pixel depth hypothesis lattice [D, H, W], increasing along axis 0.

    Level 1 spans [near, far] uniformly at every pixel.  Finer levels
    center a narrowed span (beta * (far - near)) on the previous level's
    depth estimate, upsampled 2x, and shift it to stay inside [near, far].
    """
    d = cfg.n_hyp[level - 1]
    if level == 1:
        line = np.linspace(near, far, d)
        return np.broadcast_to(line[:, None, None], (d, height, width)).copy()
    if prev_depth is None:
        raise StateError(f"level {level} needs the previous depth map")
    up = np.repeat(np.repeat(prev_depth, 2, axis=0), 2, axis=1)
    if up.shape != (height, width):
        raise ShapeError(
            f"upsampled depth {up.shape} does not match {(height, width)}")
    # ranges narrow recursively: width_l = width_{l-1} * beta_{l-1}
    span = (far - near) * float(np.prod(cfg.betas[:level - 1]))
    lo = np.clip(up - span / 2.0, near, far - span)
    step = span / (d - 1)
    return lo[None] + step * np.arange(d)[:, None, None]


def build_raw_volume(cfg: ModelConfig, ref: cam.Camera,
                     srcs: Sequence[cam.Camera], feats: Sequence[Tensor],
                     hyp: np.ndarray):
    """Variance aggregation of warped source features over the sweep.

    feats: per-source feature maps [C, H, W] at the level resolution that
    matches ref/srcs intrinsics.  hyp: [D, H, W] hypothesis depths.

    Returns (vol [C, D, H, W] Tensor, valid [D, H, W] bool).  A cell is
    valid when at least two source views observe it; invalid cells are
    zeroed.  Raises EmptyOverlapError when no cell is valid.
    """
    c, h, w = feats[0].shape
    d = hyp.shape[0]
    if hyp.shape != (d, h, w):
        raise ShapeError("hypothesis lattice must match feature resolution")
    uv = cam.pixel_grid(h, w)                                # [2, H, W]
    uv_tiled = np.broadcast_to(uv[:, None], (2, d, h, w))

    s1 = None
    s2 = None
    count = np.zeros((d * h * w, 1))
    for src, feat in zip(srcs, feats):
        uv_src, _, in_front = cam.inverse_warp_pixels(uv_tiled, hyp, ref, src)
        ok = in_front & footprint_valid(uv_src[0], uv_src[1], w, h)
        m = ok.reshape(-1, 1).astype(feat.values.dtype)
        f = bilinear_sample(feat, uv_src[0], uv_src[1])      # [D*H*W, C]
        fm = f * m
        s1 = fm if s1 is None else s1 + fm
        sq = fm * f
        s2 = sq if s2 is None else s2 + sq
        count += m

    valid = count.reshape(d, h, w) >= 2.0
    if not valid.any():
        raise EmptyOverlapError("no hypothesis cell is seen by two views")
    denom = np.maximum(count, 1.0)
    mean = s1 * (1.0 / denom)
    var = s2 * (1.0 / denom) - mean * mean
    var = var * valid.reshape(-1, 1).astype(var.values.dtype)
    vol = ad.transpose(ad.reshape(var, (d, h, w, c)), (3, 0, 1, 2))
    return vol, valid


def regularize(store, level: int, raw: Tensor) -> Tensor:
    """3-D smoothing network: [C_l, D, H, W] -> [C_v, D, H, W]."""
    x = raw
    for i in range(3):
        w = store[f"reg.l{level}.c{i}.w"]
        b = store[f"reg.l{level}.c{i}.b"]
        x = ad.conv3d(x, w, pad=1) + b.reshape(-1, 1, 1, 1)
        if i < 2:
            x = ad.relu(x)
    return x
