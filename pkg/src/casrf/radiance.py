"""Point-wise radiance regression and depth-guided feature fusion.

Density comes from a tiny shared MLP over the volume feature and the
per-view direction differences; color is a softmax blend of source-view
colors weighted by a second per-level MLP.  Fusion cross-attends each
point's volume feature, projected colors, and projected features over K
learned pixel neighbors before those MLPs run.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .model import N_FREQ

LN_EPS = 1e-5
MASK_OFF = -1e30


def _linear(store, name: str, x: Tensor) -> Tensor:
    return x @ store[name + ".w"] + store[name + ".b"]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = ad.tmean(x, axis=-1, keepdims=True)
    cen = x - mu
    var = ad.tmean(cen * cen, axis=-1, keepdims=True)
    return cen / ad.sqrt(var + LN_EPS) * gain + bias


def positional_encoding(x: np.ndarray) -> np.ndarray:
    """Fourier features of world positions: [..., 3] -> [..., 6 * N_FREQ]."""
    freqs = 2.0 ** np.arange(N_FREQ)
    ang = x[..., None] * freqs                               # [..., 3, F]
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(x.shape[:-1] + (3 * 2 * N_FREQ,))


def density_mlp(store, feat: Tensor, deltas: Tensor):
    """(sigma [P], f_h [P, hidden]) from [P, C] features + [P, 3N] deltas."""
    x = ad.concat([feat, deltas], axis=1)
    f_h = ad.relu(_linear(store, "mlp1.fc1", x))
    sigma = ad.softplus(_linear(store, "mlp1.fc2", f_h))
    return ad.reshape(sigma, (-1,)), f_h


def blend_logits(store, level: int, deltas: Tensor, f_h: Tensor,
                 colors: Tensor, feats: Tensor) -> Tensor:
    """Per-view blending logits.

    deltas [P, N, 3], f_h [P, H], colors [P, N, 3], feats [P, N, C] ->
    logits [P, N].  One shared MLP applied independently per view.
    """
    p, n, _ = deltas.shape
    hid = f_h.shape[1]
    fh_b = f_h.reshape(p, 1, hid) * np.ones((1, n, 1))
    x = ad.concat([deltas, fh_b, colors, feats], axis=2)
    h = ad.relu(_linear(store, f"mlp2.l{level}.fc1", x))
    out = _linear(store, f"mlp2.l{level}.fc2", h)
    return ad.reshape(out, (p, n))


def blend_color(logits: Tensor, colors: Tensor,
                valid: np.ndarray = None) -> Tensor:
    """Softmax blend over views: logits [P, N], colors [P, N, 3] -> [P, 3].

    Invalid views get a -inf-like logit; if a pixel has no valid view the
    blend falls back to a uniform average.
    """
    if valid is not None:
        logits = logits + np.where(valid, 0.0, MASK_OFF)
    w = ad.softmax(logits, axis=1)
    p, n = w.shape
    return ad.tsum(w.reshape(p, n, 1) * colors, axis=1)


def predict_offsets(store, depth: np.ndarray, warped_feats: Tensor,
                    fusion_k: int, max_offset: float) -> Tensor:
    """Per-pixel neighbor offsets from depth + warped source features.

    depth [H, W] (constant guidance), warped_feats [N*C, H, W] ->
    offsets [K, 2, H, W] as (du, dv), bounded by max_offset.
    """
    h, w = depth.shape
    x = ad.concat([Tensor(depth.reshape(1, h, w)), warped_feats], axis=0)
    x = x.reshape(1, -1, h, w)
    for i, act in ((0, True), (1, True), (2, False)):
        wt = store[f"fusion.offsets.c{i}.w"]
        bt = store[f"fusion.offsets.c{i}.b"]
        x = ad.conv2d(x, wt, pad=1) + bt.reshape(-1, 1, 1)
        if act:
            x = ad.relu(x)
    out = ad.tanh(x) * max_offset
    return out.reshape(fusion_k, 2, h, w)


def cross_attention(store, prefix: str, query: Tensor, kv: Tensor,
                    n_heads: int, valid: np.ndarray = None) -> Tensor:
    """Single-layer multi-head cross-attention.

    query [P, D], kv [P, K, D] -> [P, D] (pre-residual output).  valid
    [P, K] masks neighbors out of the softmax; rows with no valid
    neighbor return exactly zero.
    """
    p, dm = query.shape
    k = kv.shape[1]
    if dm % n_heads:
        raise ShapeError(f"model dim {dm} not divisible by {n_heads} heads")
    dh = dm // n_heads

    q = _linear(store, prefix + ".q", query).reshape(p, n_heads, 1, dh)
    kt = _linear(store, prefix + ".k", kv).reshape(p, k, n_heads, dh)
    vt = _linear(store, prefix + ".v", kv).reshape(p, k, n_heads, dh)
    kt = ad.moveaxis(kt, 1, 2)                               # [P, h, K, dh]
    vt = ad.moveaxis(vt, 1, 2)

    scores = (q @ ad.transpose(kt, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if valid is not None:
        scores = scores + np.where(valid, 0.0, MASK_OFF)[:, None, None, :]
    attn = ad.softmax(scores, axis=-1)                       # [P, h, 1, K]
    out = (attn @ vt).reshape(p, dm)
    out = _linear(store, prefix + ".o", out)
    if valid is not None:
        out = out * valid.any(axis=1).astype(out.values.dtype).reshape(p, 1)
    return out


def fuse_volume_features(store, f_v: Tensor, neighbors: Tensor) -> Tensor:
    """Cross-attend a point's volume feature over its K neighbors.

    f_v [P, C_v], neighbors [P, K, C_v] -> layer-normalized fused feature.
    """
    att = cross_attention(store, "fusion.vol", f_v, neighbors, n_heads=4)
    return layer_norm(f_v + att, store["vnorm.gain"], store["vnorm.bias"])


def fuse_colors(store, c_i: Tensor, neighbors: Tensor,
                valid: np.ndarray) -> Tensor:
    """Fused per-view color: residual attention output clamped to [0,1]."""
    att = cross_attention(store, "fusion.col", c_i, neighbors, n_heads=1,
                          valid=valid)
    return ad.clip(c_i + att, 0.0, 1.0)


def fuse_feats(store, f_i: Tensor, neighbors: Tensor,
               valid: np.ndarray) -> Tensor:
    """Fused per-view projected feature (residual, no clamp)."""
    att = cross_attention(store, "fusion.feat", f_i, neighbors, n_heads=4,
                          valid=valid)
    return f_i + att
