"""Multi-scale image feature extraction.

A small strided encoder followed by a top-down merge. Outputs three maps,
coarse to fine: 1/4 resolution (widest) up to full resolution (narrowest).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def _conv(x, store, name: str, stride: int = 1, pad: int = 1):
    w = store[name + ".w"]
    b = store[name + ".b"]
    out = ad.conv2d(x, w, stride=stride, pad=pad)
    return out + b.reshape(-1, 1, 1)


def upsample2(x):
    """Nearest-neighbor 2x upsampling of [N, C, H, W]."""
    n, c, h, w = x.shape
    ones = np.ones((1, 1, 1, 2, 1, 2))
    out = x.reshape(n, c, h, 1, w, 1) * ones
    return out.reshape(n, c, 2 * h, 2 * w)


def extract_features(store, image) -> tuple:
    """Run the pyramid on one [3, H, W] image.

    Returns (f1, f2, f3): [c1, H/4, W/4], [c2, H/2, W/2], [c3, H, W].
    H and W must be multiples of 4.
    """
    img = image if isinstance(image, Tensor) else Tensor(image)
    c, h, w = img.shape
    if c != 3:
        raise ShapeError(f"expected [3, H, W] image, got {img.shape}")
    if h % 4 or w % 4:
        raise ShapeError(f"image size {h}x{w} not divisible by 4")
    x = img.reshape(1, 3, h, w)
    x = ad.relu(_conv(x, store, "pyramid.enc0"))
    e1 = ad.relu(_conv(x, store, "pyramid.enc1"))
    x = ad.relu(_conv(e1, store, "pyramid.enc2", stride=2))
    e3 = ad.relu(_conv(x, store, "pyramid.enc3"))
    x = ad.relu(_conv(e3, store, "pyramid.enc4", stride=2))
    e5 = ad.relu(_conv(x, store, "pyramid.enc5"))

    p1 = _conv(e5, store, "pyramid.lat1", pad=0)
    p2 = _conv(e3, store, "pyramid.lat2", pad=0) + \
        _conv(upsample2(p1), store, "pyramid.top2", pad=0)
    p3 = _conv(e1, store, "pyramid.lat3", pad=0) + \
        _conv(upsample2(p2), store, "pyramid.top3", pad=0)
    return p1[0], p2[0], p3[0]


def area_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a [C, H, W] array by an integer factor."""
    if factor == 1:
        return image
    c, h, w = image.shape
    if h % factor or w % factor:
        raise ShapeError(f"size {h}x{w} not divisible by {factor}")
    return image.reshape(c, h // factor, factor, w // factor, factor).mean((2, 4))
