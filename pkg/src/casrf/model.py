"""Model configuration and parameter construction.

The cascade runs three levels, coarse to fine.  Level l works at
1/2^(3-l) of the input resolution with feature width channels[l-1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

from .errors import ConfigError
from .params import ParamStore

N_FREQ = 4  # positional encoding frequencies for the no-shared-volume ablation


@dataclass
class ModelConfig:
    n_sources: int = 3
    channels: Tuple[int, int, int] = (32, 16, 8)      # per level, coarse first
    n_hyp: Tuple[int, int, int] = (48, 32, 8)         # depth hypotheses per level
    n_samples: Tuple[int, int, int] = (8, 8, 4)       # ray samples per level
    alphas: Tuple[float, float, float] = (1 / 6, 1 / 4, 1 / 2)
    betas: Tuple[float, float] = (1 / 6, 1 / 16)      # range narrowing, levels 2 and 3
    cv: int = 8            # regularized volume feature width
    hidden: int = 16       # MLP hidden width
    fusion: bool = True
    shared_volume: bool = True
    fusion_k: int = 8      # learned neighbors per pixel
    max_offset: float = 8.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_sources < 2:
            raise ConfigError("n_sources must be at least 2")
        for l in range(3):
            if self.n_samples[l] > self.n_hyp[l]:
                raise ConfigError(
                    f"level {l + 1}: n_samples {self.n_samples[l]} exceeds "
                    f"n_hyp {self.n_hyp[l]}")
        if self.fusion_k < 1:
            raise ConfigError("fusion_k must be positive")

    def density_in_dim(self) -> int:
        """Input width of the density MLP."""
        geo = 3 * self.n_sources
        if self.shared_volume:
            return self.cv + geo
        return 2 * N_FREQ * 3 + geo  # sin/cos positional encoding of x

    def blend_in_dim(self, level: int) -> int:
        """Input width of the per-level blending MLP (level is 1-based)."""
        return 3 + self.hidden + 3 + self.channels[level - 1]


def _add_conv2d(store: ParamStore, name: str, c_out: int, c_in: int, k: int = 3):
    store.add(name + ".w", (c_out, c_in, k, k), fan_in=c_in * k * k)
    store.add(name + ".b", (c_out,), init="zeros")


def _add_conv3d(store: ParamStore, name: str, c_out: int, c_in: int):
    store.add(name + ".w", (c_out, c_in, 3, 3, 3), fan_in=c_in * 27)
    store.add(name + ".b", (c_out,), init="zeros")


def _add_linear(store: ParamStore, name: str, d_in: int, d_out: int,
                zero: bool = False):
    if zero:
        store.add(name + ".w", (d_in, d_out), init="zeros")
    else:
        store.add(name + ".w", (d_in, d_out), fan_in=d_in)
    store.add(name + ".b", (d_out,), init="zeros")


def _add_attention(store: ParamStore, name: str, dim: int):
    # Value projection starts at zero so the block is an exact identity
    # (residual adds zero) until training moves it.
    _add_linear(store, name + ".q", dim, dim)
    _add_linear(store, name + ".k", dim, dim)
    _add_linear(store, name + ".v", dim, dim, zero=True)
    _add_linear(store, name + ".o", dim, dim)


def build_params(cfg: ModelConfig) -> ParamStore:
    cfg.validate()
    store = ParamStore(seed=cfg.seed)
    c1, c2, c3 = cfg.channels

    # Image encoder: three stride blocks, then lateral/top-down merge.
    _add_conv2d(store, "pyramid.enc0", 8, 3)
    _add_conv2d(store, "pyramid.enc1", 8, 8)
    _add_conv2d(store, "pyramid.enc2", 16, 8)    # stride 2
    _add_conv2d(store, "pyramid.enc3", 16, 16)
    _add_conv2d(store, "pyramid.enc4", 32, 16)   # stride 2
    _add_conv2d(store, "pyramid.enc5", 32, 32)
    _add_conv2d(store, "pyramid.lat1", c1, 32, k=1)
    _add_conv2d(store, "pyramid.lat2", c2, 16, k=1)
    _add_conv2d(store, "pyramid.lat3", c3, 8, k=1)
    _add_conv2d(store, "pyramid.top2", c2, c1, k=1)
    _add_conv2d(store, "pyramid.top3", c3, c2, k=1)

    # Per-level 3D regularizer over the variance volume.
    for l, c_in in ((1, c1), (2, c2), (3, c3)):
        _add_conv3d(store, f"reg.l{l}.c0", cfg.hidden, c_in)
        _add_conv3d(store, f"reg.l{l}.c1", cfg.hidden, cfg.hidden)
        _add_conv3d(store, f"reg.l{l}.c2", cfg.cv, cfg.hidden)

    # Depth head: 1x1x1 projection to a per-hypothesis score.
    for l in (1, 2, 3):
        _add_linear(store, f"head.l{l}.proj", cfg.cv, 1)

    # Density MLP, shared across levels.
    _add_linear(store, "mlp1.fc1", cfg.density_in_dim(), cfg.hidden)
    _add_linear(store, "mlp1.fc2", cfg.hidden, 1)
    if cfg.shared_volume:
        store.add("vnorm.gain", (cfg.cv,), init="ones")
        store.add("vnorm.bias", (cfg.cv,), init="zeros")

    # Per-level blending MLP (shared across views).
    for l in (1, 2, 3):
        _add_linear(store, f"mlp2.l{l}.fc1", cfg.blend_in_dim(l), cfg.hidden)
        _add_linear(store, f"mlp2.l{l}.fc2", cfg.hidden, 1)

    if cfg.fusion:
        # Offset predictor eats [depth, warped finest features] and emits
        # 2K per-pixel offsets.  Final layer starts at zero: neighbors sit
        # on the query pixel until trained.
        c_in = 1 + cfg.n_sources * c3
        _add_conv2d(store, "fusion.offsets.c0", cfg.hidden, c_in)
        _add_conv2d(store, "fusion.offsets.c1", cfg.hidden, cfg.hidden)
        store.add("fusion.offsets.c2.w", (2 * cfg.fusion_k, cfg.hidden, 3, 3),
                  init="zeros")
        store.add("fusion.offsets.c2.b", (2 * cfg.fusion_k,), init="zeros")
        if cfg.shared_volume:
            _add_attention(store, "fusion.vol", cfg.cv)
        _add_attention(store, "fusion.col", 3)
        _add_attention(store, "fusion.feat", c3)
    return store
