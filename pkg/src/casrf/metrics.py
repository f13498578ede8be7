"""Image and geometry evaluation plus multi-view depth fusion.

Pure numpy: these run on plain arrays, never on autodiff tensors.
"""

from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import cameras as cam
from .errors import EmptyCloudError, EmptyMaskError, ShapeError

PSNR_SENTINEL = math.inf


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images; identical inputs give inf."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter2(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering of [H, W] with a 1-D kernel."""
    n = len(k)
    win = np.lib.stride_tricks.sliding_window_view(img, n, axis=1)
    horiz = win @ k                                          # [H, W-n+1]
    win = np.lib.stride_tricks.sliding_window_view(horiz, n, axis=0)
    return win @ k                                           # [H-n+1, W-n+1]


def ssim(a: np.ndarray, b: np.ndarray, size: int = 11,
         sigma: float = 1.5) -> float:
    """Mean SSIM with a Gaussian window; accepts [H,W] or [C,H,W]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    k = _gaussian_kernel(size, sigma)
    vals = []
    for x, y in zip(a, b):
        mx, my = _filter2(x, k), _filter2(y, k)
        vx = _filter2(x * x, k) - mx * mx
        vy = _filter2(y * y, k) - my * my
        cxy = _filter2(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                  thresholds: Sequence[float]):
    """(abs_err, {tau: inlier fraction}) over the masked pixels."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape or pred.shape != np.shape(mask):
        raise ShapeError("depth/mask shapes differ")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("no valid pixels to evaluate")
    err = np.abs(pred - gt)[mask]
    abs_err = float(err.mean())
    acc = {float(t): float((err < t).mean()) for t in thresholds}
    return abs_err, acc


def fuse_depths(views: Sequence[Tuple], n_consistent: int = 2,
                eps_px: float = 1.0, eps_rel: float = 0.01,
                conf_min: float = 0.5, images: Sequence[np.ndarray] = None):
    """Geometric-consistency depth fusion into a colored point cloud.

    views: list of (depth [H,W], confidence [H,W] or None, Camera).  A
    pixel survives when at least n_consistent OTHER views agree with it:
    reprojecting its 3D point into view j, reading j's depth at the
    nearest pixel, and lifting it back lands within eps_px pixels and
    eps_rel relative depth.  Surviving points are averaged with their
    consistent correspondences.  Returns (points [M,3], colors [M,3]).
    """
    if len(views) < 2:
        raise ShapeError("fusion needs at least two views")
    n = len(views)
    clouds = []
    for depth, conf, camera in views:
        h, w = depth.shape
        uv = cam.pixel_grid(h, w)
        clouds.append(cam.unproject(camera, uv, depth))      # [3, H, W]

    points, colors = [], []
    for i, (depth_i, conf_i, cam_i) in enumerate(views):
        h, w = depth_i.shape
        X = clouds[i].reshape(3, -1)                         # own points
        ok = np.ones(h * w, dtype=bool)
        if conf_i is not None:
            ok &= conf_i.reshape(-1) > conf_min
        n_agree = np.zeros(h * w, dtype=np.int64)
        acc = X.copy()
        for j in range(n):
            if j == i:
                continue
            depth_j, _, cam_j = views[j]
            hj, wj = depth_j.shape
            uv_j, z_j = cam.project(cam_j, X)
            front = z_j > 0
            cols = np.floor(uv_j[0]).astype(np.int64)
            rows = np.floor(uv_j[1]).astype(np.int64)
            inside = front & (cols >= 0) & (cols < wj) & (rows >= 0) & \
                (rows < hj)
            cols_c = np.clip(cols, 0, wj - 1)
            rows_c = np.clip(rows, 0, hj - 1)
            d_j = depth_j[rows_c, cols_c]
            # lift view j's stored pixel back to 3D and into view i
            uv_back = cam.pixel_grid(hj, wj)[:, rows_c, cols_c]
            X_back = cam.unproject(cam_j, uv_back, d_j)      # [3, P]
            uv_i, z_i = cam.project(cam_i, X_back)
            front_i = z_i > 0
            grid_i = cam.pixel_grid(h, w).reshape(2, -1)
            repro = np.hypot(uv_i[0] - grid_i[0], uv_i[1] - grid_i[1])
            rel = np.abs(z_i - depth_i.reshape(-1)) / \
                np.maximum(depth_i.reshape(-1), 1e-12)
            good = inside & front_i & (repro < eps_px) & (rel < eps_rel)
            n_agree += good
            acc[:, good] += X_back[:, good]
        keep = ok & (n_agree >= n_consistent)
        fused = acc[:, keep] / (n_agree[keep] + 1.0)
        points.append(fused.T)
        if images is not None:
            colors.append(images[i].reshape(3, -1).T[keep])
        else:
            colors.append(np.full((int(keep.sum()), 3), 0.5))
    return np.concatenate(points, axis=0), np.concatenate(colors, axis=0)


def _nearest_capped(queries: np.ndarray, targets: np.ndarray,
                    cap: float) -> np.ndarray:
    """Distance from each query to its nearest target, capped at cap.

    Exact: a uniform grid with cell size == cap guarantees any target
    closer than cap lies in the 27 cells around the query's cell.
    Queries are processed one occupied cell at a time so the inner work
    is vectorized over that cell's queries and candidate targets.
    """
    cell = cap
    tkeys = np.floor(targets / cell).astype(np.int64)
    buckets: Dict[tuple, np.ndarray] = {}
    order = np.lexsort(tkeys.T[::-1])
    sk = tkeys[order]
    edges = np.flatnonzero(np.any(np.diff(sk, axis=0), axis=1)) + 1
    for grp in np.split(order, edges):
        buckets[tuple(tkeys[grp[0]])] = grp

    out = np.full(len(queries), cap, dtype=np.float64)
    qkeys = np.floor(queries / cell).astype(np.int64)
    qorder = np.lexsort(qkeys.T[::-1])
    qk = qkeys[qorder]
    qedges = np.flatnonzero(np.any(np.diff(qk, axis=0), axis=1)) + 1
    offs = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
            for dz in (-1, 0, 1)]
    for grp in np.split(qorder, qedges):
        key = qkeys[grp[0]]
        cand: List[np.ndarray] = []
        for off in offs:
            hit = buckets.get((key[0] + off[0], key[1] + off[1],
                               key[2] + off[2]))
            if hit is not None:
                cand.append(hit)
        if not cand:
            continue
        tpts = targets[np.concatenate(cand)]
        q = queries[grp]
        d2 = ((q[:, None, :] - tpts[None, :, :]) ** 2).sum(axis=2)
        out[grp] = np.minimum(np.sqrt(d2.min(axis=1)), cap)
    return out


def point_metrics(pred: np.ndarray, gt: np.ndarray, cap: float):
    """(acc, comp, overall): capped mean nearest-neighbor distances."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyCloudError("point_metrics needs nonempty clouds")
    acc = float(_nearest_capped(pred, gt, cap).mean())
    comp = float(_nearest_capped(gt, pred, cap).mean())
    return acc, comp, (acc + comp) / 2.0
