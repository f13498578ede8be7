"""Differentiable bilinear / trilinear sampling.

Samplers are composed from integer gathers (constant indices) and tensor
arithmetic on the fractional weights, so gradients flow both into the
sampled values and into continuous sample positions when those are Tensors.

Positions follow the pixel-center convention: (u, v) = (col + 0.5, row + 0.5).
Lookups outside the image clamp to the border texel (constant extrapolation,
zero positional gradient there).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def _pos_values(p) -> np.ndarray:
    return p.values if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def footprint_valid(u, v, width: int, height: int) -> np.ndarray:
    """True where the continuous point lies inside the image rectangle."""
    uu, vv = _pos_values(u), _pos_values(v)
    return (uu >= 0.0) & (uu <= width) & (vv >= 0.0) & (vv <= height)


def _corner_setup(x, size: int):
    """Split continuous texel coordinate into clamped corners + fraction."""
    xv = _pos_values(x)
    x0f = np.floor(xv)
    lo = np.clip(x0f, 0, size - 1).astype(np.int64)
    hi = np.clip(x0f + 1, 0, size - 1).astype(np.int64)
    frac = ad.sub(x, x0f) if isinstance(x, Tensor) else Tensor(xv - x0f)
    return lo, hi, frac


def bilinear_sample(img: Tensor, u, v) -> Tensor:
    """Sample img [C, H, W] at continuous positions u, v (any shape).

    Returns a Tensor [P, C] with P = number of positions (row-major over
    the position shape).  u and v may be Tensors (gradients flow into them)
    or plain arrays.
    """
    img = ad.as_tensor(img)
    if img.ndim != 3:
        raise ShapeError("bilinear_sample expects [C, H, W]")
    c, h, w = img.shape
    uf = ad.reshape(u, (-1,)) if isinstance(u, Tensor) else np.asarray(u).reshape(-1)
    vf = ad.reshape(v, (-1,)) if isinstance(v, Tensor) else np.asarray(v).reshape(-1)

    # shift to texel coordinates: texel (i, j)'s center is at (j + 0.5, i + 0.5)
    x = ad.sub(uf, 0.5) if isinstance(uf, Tensor) else uf - 0.5
    y = ad.sub(vf, 0.5) if isinstance(vf, Tensor) else vf - 0.5

    x0, x1, fx = _corner_setup(x, w)
    y0, y1, fy = _corner_setup(y, h)

    flat = ad.transpose(ad.reshape(img, (c, h * w)))        # [H*W, C]
    g00 = ad.gather_rows(flat, y0 * w + x0)
    g01 = ad.gather_rows(flat, y0 * w + x1)
    g10 = ad.gather_rows(flat, y1 * w + x0)
    g11 = ad.gather_rows(flat, y1 * w + x1)

    fx = ad.reshape(fx, (-1, 1))
    fy = ad.reshape(fy, (-1, 1))
    one = 1.0
    top = ad.add(ad.mul(g00, ad.sub(one, fx)), ad.mul(g01, fx))
    bot = ad.add(ad.mul(g10, ad.sub(one, fx)), ad.mul(g11, fx))
    return ad.add(ad.mul(top, ad.sub(one, fy)), ad.mul(bot, fy))


def trilinear_volume_sample(vol: Tensor, depths: np.ndarray, u, v,
                            z: np.ndarray) -> Tensor:
    """Sample a per-pixel-lattice volume at continuous (u, v, z).

    vol: [C, D, H, W]; depths: [D, H, W] per-pixel hypothesis depths,
    uniformly spaced and strictly increasing along axis 0; u, v: positions
    (Tensor or array, any common shape); z: world depths (plain array,
    treated as constant guidance).

    Each of the 4 spatial corner pixels brackets z inside its own depth
    lattice (piecewise-linear, clamped at the span ends), then the corner
    values blend bilinearly in space.  Returns [P, C].
    """
    vol = ad.as_tensor(vol)
    if vol.ndim != 4:
        raise ShapeError("trilinear_volume_sample expects [C, D, H, W]")
    c, d, h, w = vol.shape
    if depths.shape != (d, h, w):
        raise ShapeError("depth lattice must be [D, H, W]")
    zf = np.asarray(z, dtype=np.float64).reshape(-1)
    uf = ad.reshape(u, (-1,)) if isinstance(u, Tensor) else np.asarray(u).reshape(-1)
    vf = ad.reshape(v, (-1,)) if isinstance(v, Tensor) else np.asarray(v).reshape(-1)

    x = ad.sub(uf, 0.5) if isinstance(uf, Tensor) else uf - 0.5
    y = ad.sub(vf, 0.5) if isinstance(vf, Tensor) else vf - 0.5
    x0, x1, fx = _corner_setup(x, w)
    y0, y1, fy = _corner_setup(y, h)

    d0 = depths[0]                                           # [H, W]
    step = (depths[-1] - depths[0]) / max(d - 1, 1)          # [H, W]
    flat = ad.transpose(ad.reshape(vol, (c, d * h * w)))     # [D*H*W, C]

    def corner(yc, xc):
        pix = yc * w + xc
        s = step.reshape(-1)[pix]
        base = d0.reshape(-1)[pix]
        if d == 1:
            k = np.zeros_like(pix)
            frac = np.zeros_like(zf)
        else:
            t = (zf - base) / s
            k = np.clip(np.floor(t), 0, d - 2).astype(np.int64)
            frac = np.clip(t - k, 0.0, 1.0)
        lo = ad.gather_rows(flat, k * (h * w) + pix)
        hi = ad.gather_rows(flat, (k + 1 if d > 1 else k) * (h * w) + pix)
        fr = frac.reshape(-1, 1)
        return ad.add(ad.mul(lo, 1.0 - fr), ad.mul(hi, fr))

    c00 = corner(y0, x0)
    c01 = corner(y0, x1)
    c10 = corner(y1, x0)
    c11 = corner(y1, x1)

    fx = ad.reshape(fx, (-1, 1))
    fy = ad.reshape(fy, (-1, 1))
    top = ad.add(ad.mul(c00, ad.sub(1.0, fx)), ad.mul(c01, fx))
    bot = ad.add(ad.mul(c10, ad.sub(1.0, fx)), ad.mul(c11, fx))
    return ad.add(ad.mul(top, ad.sub(1.0, fy)), ad.mul(bot, fy))
