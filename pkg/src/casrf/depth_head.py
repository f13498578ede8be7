"""Auxiliary depth prediction from the regularized volume.

A 1x1x1 projection scores every hypothesis; softmax over the hypothesis
axis gives a probability volume whose expectation is the depth estimate
and whose peak is the confidence.  Trained without ground truth via
photometric warping, structural similarity, and smoothness terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import cameras as cam
from .autodiff import Tensor
from .errors import ShapeError
from .sampling import bilinear_sample, footprint_valid

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class DepthPrediction:
    depth: Tensor          # [H, W] world units
    confidence: Tensor     # [H, W] in [1/D, 1]
    prob: Tensor           # [D, H, W], sums to 1 along axis 0


def predict_depth(store, level: int, vol: Tensor,
                  hyp: np.ndarray) -> DepthPrediction:
    """Project volume features to depth scores and take the expectation."""
    c, d, h, w = vol.shape
    if hyp.shape != (d, h, w):
        raise ShapeError("hypothesis lattice does not match the volume")
    flat = ad.transpose(ad.reshape(vol, (c, d * h * w)))     # [D*H*W, C]
    wp = store[f"head.l{level}.proj.w"]
    bp = store[f"head.l{level}.proj.b"]
    logits = ad.reshape(flat @ wp + bp, (d, h, w))
    prob = ad.softmax(logits, axis=0)
    depth = ad.tsum(prob * hyp, axis=0)
    conf = Tensor(prob.values.max(axis=0))
    return DepthPrediction(depth=depth, confidence=conf, prob=prob)


def _box3(x: Tensor) -> Tensor:
    """3x3 mean filter on [C, H, W], valid region only -> [C, H-2, W-2]."""
    c, h, w = x.shape
    k = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
    out = ad.conv2d(x.reshape(c, 1, h, w), k)
    return out.reshape(c, h - 2, w - 2)


def _erode3(valid: np.ndarray) -> np.ndarray:
    """[H, W] bool -> [H-2, W-2] bool, true where the full 3x3 patch is valid."""
    win = np.lib.stride_tricks.sliding_window_view(valid, (3, 3))
    return win.all(axis=(-2, -1))


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    m = mask.astype(x.values.dtype)
    denom = max(float(m.sum()), 1.0)
    return ad.tsum(x * m) * (1.0 / denom)


def ssim_loss_map(a: Tensor, b: Tensor) -> Tensor:
    """(1 - SSIM)/2 over 3x3 windows: [C,H,W] x2 -> [C,H-2,W-2]."""
    mu_a = _box3(a)
    mu_b = _box3(b)
    var_a = _box3(a * a) - mu_a * mu_a
    var_b = _box3(b * b) - mu_b * mu_b
    cov = _box3(a * b) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (1.0 - num / den) * 0.5


def warp_with_depth(src_img, depth: Tensor, ref: cam.Camera, src: cam.Camera):
    """Differentiably warp a source image into the reference view.

    src_img: [3, H, W] constant; depth: [H, W] Tensor of reference depths.
    Returns (warped [3, H, W] Tensor, valid [H, W] bool).  Gradients reach
    depth through the projective coordinates and the bilinear weights.
    """
    c, h, w = np.shape(src_img)
    if depth.shape != (h, w):
        raise ShapeError("depth and image resolutions differ")
    uv = cam.pixel_grid(h, w).reshape(2, -1)
    ph = np.concatenate([uv, np.ones((1, h * w))])           # [3, P]
    T = cam.relative_transform(ref, src)
    A = src.K @ T[:3, :3] @ ref.K_inv @ ph                   # [3, P]
    B = src.K @ T[:3, 3]

    d = depth.reshape(h * w)
    q0 = d * A[0] + B[0]
    q1 = d * A[1] + B[1]
    q2 = d * A[2] + B[2]
    front = q2.values > 1e-9
    zc = ad.maximum(q2, 1e-9)
    u = q0 / zc
    v = q1 / zc
    valid = front & footprint_valid(u.values, v.values, w, h)
    warped = bilinear_sample(ad.as_tensor(src_img), u, v)    # [P, 3]
    warped = ad.reshape(ad.transpose(warped), (c, h, w))
    return warped, valid.reshape(h, w)


def smoothness_loss(depth: Tensor, ref_img: np.ndarray) -> Tensor:
    """Edge-aware first-order smoothness on mean-normalized depth."""
    mean_d = ad.maximum(ad.tmean(depth), 1e-8)
    dn = depth / mean_d
    gx = ad.absolute(dn[:, 1:] - dn[:, :-1])
    gy = ad.absolute(dn[1:, :] - dn[:-1, :])
    ix = np.exp(-np.abs(ref_img[:, :, 1:] - ref_img[:, :, :-1]).mean(axis=0))
    iy = np.exp(-np.abs(ref_img[:, 1:, :] - ref_img[:, :-1, :]).mean(axis=0))
    return ad.tmean(gx * ix) + ad.tmean(gy * iy)


def mvs_loss(ref_img: np.ndarray, src_imgs: Sequence[np.ndarray],
             ref_cam: cam.Camera, src_cams: Sequence[cam.Camera],
             depth: Tensor):
    """Photometric + structural + smoothness loss for one level.

    Images are plain [3, H, W] arrays at the level resolution.  Returns
    (loss Tensor, parts dict, no_valid flag).  When no source view has a
    single valid warped pixel the loss is 0 and the flag is set.
    """
    n_used = 0
    pc_total = None
    ssim_total = None
    for img, sc in zip(src_imgs, src_cams):
        warped, valid = warp_with_depth(img, depth, ref_cam, sc)
        cnt = int(valid.sum())
        if cnt == 0:
            continue
        n_used += 1
        diff = ad.absolute(Tensor(ref_img) - warped) * valid.astype(np.float64)
        pc = ad.tsum(diff) * (1.0 / (3.0 * cnt))
        smap = ssim_loss_map(Tensor(ref_img), warped)
        emask = np.broadcast_to(_erode3(valid), smap.shape)
        sv = _masked_mean(smap, emask)
        pc_total = pc if pc_total is None else pc_total + pc
        ssim_total = sv if ssim_total is None else ssim_total + sv

    if n_used == 0:
        parts = {"pc": 0.0, "ssim": 0.0, "smooth": 0.0}
        return Tensor(0.0), parts, True
    smooth = smoothness_loss(depth, ref_img)
    pc_mean = pc_total * (1.0 / n_used)
    ssim_mean = ssim_total * (1.0 / n_used)
    loss = pc_mean + ssim_mean + smooth
    parts = {"pc": float(pc_mean.values), "ssim": float(ssim_mean.values),
             "smooth": float(smooth.values)}
    return loss, parts, False
