"""Three-level cascade rendering.

Each level builds a hypothesis lattice (narrowed around the previous
level's depth), sweeps source features into a regularized volume,
predicts depth, selects ray samples near that depth, evaluates the
radiance field at the samples (with neighbor fusion at the final level),
and ray-marches to color and depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import cameras as cam
from . import radiance as rf
from .autodiff import Tensor
from .depth_head import DepthPrediction, predict_depth
from .errors import ContractError, ShapeError
from .model import ModelConfig
from .params import ParamStore
from .pyramid import area_downsample, extract_features
from .sampling import bilinear_sample, footprint_valid, trilinear_volume_sample
from .volume import build_hypotheses, build_raw_volume, regularize

OPACITY_EPS = 1e-8


def select_samples(hyp: np.ndarray, depth: np.ndarray, n_b: int):
    """Pick the n_b hypotheses nearest the predicted depth, per pixel.

    hyp: [D, P] ascending per column; depth: [P].  Ties favor the smaller
    depth.  Returns (indices [P, n_b], depths [P, n_b]), ascending.
    """
    d = hyp.shape[0]
    if n_b > d:
        raise ContractError(f"n_b {n_b} exceeds hypothesis count {d}")
    dist = np.abs(hyp - depth[None])
    order = np.argsort(dist, axis=0, kind="stable")          # ties -> lower k
    sel = np.sort(order[:n_b], axis=0).T                     # [P, n_b]
    return sel, np.take_along_axis(hyp, sel.T, axis=0).T


def ray_march(sigma: Tensor, radiance: Tensor, z: np.ndarray,
              bg: np.ndarray = None, literal_depth: bool = False):
    """Accumulate per-sample density/radiance along each ray.

    sigma [P, K], radiance [P, K, 3], z [P, K] ascending.  Returns a dict:
    color [P, 3], depth [P], opacity [P], weights [P, K], zero_flag [P]
    (True where total opacity <= eps; such pixels take the background
    color and the span midpoint as depth).  literal_depth switches the
    depth to the unnormalized sum of sigma_k * z_k for comparison runs.
    """
    p, k = sigma.shape
    if np.any(np.diff(z, axis=1) < 0):
        raise ContractError("ray samples must be sorted by ascending depth")
    cs = ad.cumsum(sigma, axis=1)
    tau = ad.exp(sigma - cs)                                 # exp(-sum_{j<k})
    a = tau * (1.0 - ad.exp(-sigma))                         # [P, K]
    color = ad.tsum(a.reshape(p, k, 1) * radiance, axis=1)   # [P, 3]
    opacity = ad.tsum(a, axis=1)
    zero = opacity.values <= OPACITY_EPS
    if bg is not None and zero.any():
        color = color + np.where(zero[:, None], bg[None], 0.0)
    if literal_depth:
        depth = ad.tsum(sigma * z, axis=1)
    else:
        ahat = a / ad.maximum(opacity, OPACITY_EPS).reshape(p, 1)
        depth = ad.tsum(ahat * z, axis=1)
        mid = 0.5 * (z[:, 0] + z[:, -1])
        depth = depth * (~zero).astype(z.dtype) + mid * zero
    return {"color": color, "depth": depth, "opacity": opacity,
            "weights": a, "tau": tau, "zero_flag": zero}


@dataclass
class LevelState:
    level: int
    height: int
    width: int
    hyp: np.ndarray                      # [D, H, W]
    volume: Tensor                       # [C_v, D, H, W]
    valid: np.ndarray                    # [D, H, W]
    depth_pred: DepthPrediction
    pixels: Optional[np.ndarray] = None  # flat indices rendered
    sample_z: Optional[np.ndarray] = None
    sample_idx: Optional[np.ndarray] = None
    color: Optional[Tensor] = None       # [P, 3]
    depth: Optional[Tensor] = None       # [P]
    opacity: Optional[Tensor] = None
    zero_flag: Optional[np.ndarray] = None
    weights: Optional[Tensor] = None


@dataclass
class RenderResult:
    levels: List[LevelState] = field(default_factory=list)

    @property
    def final(self) -> LevelState:
        return self.levels[-1]


def _pe_features(ref, uv, z):
    """Positional-encoding replacement for volume features: [S, 6*N_FREQ]."""
    x = cam.unproject(ref, uv, z)                            # [3, P, K]
    enc = rf.positional_encoding(np.moveaxis(x, 0, -1))      # [P, K, 6F]
    return Tensor(enc.reshape(-1, enc.shape[-1]))


class _FusionContext:
    """Per-pixel fusion state shared by every sample on a ray."""

    def __init__(self, store, cfg, state: LevelState, ref, srcs, imgs, feats,
                 pix):
        h, w = state.height, state.width
        k = cfg.fusion_k
        depth_map = state.depth_pred.depth.values            # guidance only
        grid = cam.pixel_grid(h, w).reshape(2, -1)

        warped = []
        for sc, ft in zip(srcs, feats):
            uv_s, _, front = cam.inverse_warp_pixels(
                grid, depth_map.reshape(-1), ref, sc)
            ok = front & footprint_valid(uv_s[0], uv_s[1], w, h)
            f = bilinear_sample(ft, uv_s[0], uv_s[1])        # [H*W, C]
            f = f * ok[:, None].astype(f.values.dtype)
            c = ft.shape[0]
            warped.append(ad.reshape(ad.transpose(f), (c, h, w)))
        offsets = rf.predict_offsets(store, depth_map, ad.concat(warped, 0),
                                     k, cfg.max_offset)      # [K, 2, H, W]

        flat = ad.transpose(ad.reshape(offsets, (2 * k, h * w)))
        offs = ad.gather_rows(flat, pix).reshape(len(pix), k, 2)
        u_n = offs[:, :, 0] + grid[0][pix][:, None]          # [P, K] Tensor
        v_n = offs[:, :, 1] + grid[1][pix][:, None]

        # Neighbor depths come from the level depth map (guidance).
        d_n = bilinear_sample(Tensor(depth_map[None]), u_n, v_n)
        self.d_n = ad.reshape(d_n, (len(pix), k))
        self.u_n, self.v_n = u_n, v_n
        self.k = k
        self.ref, self.srcs = ref, srcs
        self.imgs, self.feats = imgs, feats
        self.h, self.w = h, w

    def volume_neighbors(self, volume, hyp, z: np.ndarray, sl: slice):
        """Trilinear volume features at the K neighbor pixels, same depth
        as each query sample.  z: [P_sl, n_s].  Returns [P_sl*n_s, K, C_v]."""
        u_n, v_n = self.u_n[sl], self.v_n[sl]
        p, k = u_n.shape
        n_s = z.shape[1]
        u = u_n.reshape(p, 1, k) * np.ones((1, n_s, 1))
        v = v_n.reshape(p, 1, k) * np.ones((1, n_s, 1))
        zz = np.broadcast_to(z[:, :, None], (p, n_s, k))
        f = trilinear_volume_sample(volume, hyp, u, v, zz)
        return ad.reshape(f, (p * n_s, k, volume.shape[0]))

    def source_neighbors(self, view: int, n_s: int, sl: slice):
        """Neighbor colors/features projected into one source view.

        Returns (colors [P_sl*n_s, K, 3], feats [P_sl*n_s, K, C], valid
        [P_sl*n_s, K]); the per-pixel projections are shared across the
        n_s ray samples of that pixel.
        """
        u_n, v_n, d_n = self.u_n[sl], self.v_n[sl], self.d_n[sl]
        p, k = u_n.shape
        src = self.srcs[view]
        T = cam.relative_transform(self.ref, src)
        A = src.K @ T[:3, :3] @ self.ref.K_inv
        B = src.K @ T[:3, 3]

        ud = u_n * d_n
        vd = v_n * d_n
        q0 = ud * A[0, 0] + vd * A[0, 1] + d_n * A[0, 2] + B[0]
        q1 = ud * A[1, 0] + vd * A[1, 1] + d_n * A[1, 2] + B[1]
        q2 = ud * A[2, 0] + vd * A[2, 1] + d_n * A[2, 2] + B[2]
        front = q2.values > 1e-9
        zc = ad.maximum(q2, 1e-9)
        us, vs = q0 / zc, q1 / zc
        ok = front & footprint_valid(us.values, vs.values, self.w, self.h)

        cols = bilinear_sample(self.imgs[view], us, vs).reshape(p, k, 3)
        c = self.feats[view].shape[0]
        fts = bilinear_sample(self.feats[view], us, vs).reshape(p, k, c)

        def tile(t):
            shp = (p, 1) + tuple(t.shape[1:])
            ones = np.ones((1, n_s) + (1,) * (len(t.shape) - 1))
            return ad.reshape(t.reshape(*shp) * ones,
                              (p * n_s,) + tuple(t.shape[1:]))

        valid = np.broadcast_to(ok[:, None], (p, n_s, k)).reshape(p * n_s, k)
        return tile(cols), tile(fts), valid


def _evaluate_field(store, cfg: ModelConfig, level: int, state: LevelState,
                    ref, srcs, imgs, feats, pix, z, sel_idx,
                    fusion_ctx: Optional[_FusionContext], sl: slice):
    """Radiance field at the selected samples of the given pixels.

    Returns (sigma [P, n_s], radiance [P, n_s, 3]).
    """
    n_p = len(pix)
    n_s = z.shape[1]
    s = n_p * n_s
    h, w = state.height, state.width
    grid = cam.pixel_grid(h, w).reshape(2, -1)
    uv = np.broadcast_to(grid[:, pix, None], (2, n_p, n_s))

    # Volume feature exactly at the selected lattice nodes.
    c_v = state.volume.shape[0]
    vol_flat = ad.transpose(ad.reshape(state.volume, (c_v, -1)))
    rows = (sel_idx * (h * w) + pix[:, None]).reshape(-1)
    f_v = ad.gather_rows(vol_flat, rows)                     # [S, C_v]

    dd = cam.delta_directions_grid(ref, srcs, uv, z)         # [3N, P, n_s]
    dd_flat = Tensor(np.moveaxis(dd, 0, -1).reshape(s, -1))  # [S, 3N]
    n = len(srcs)
    dd_views = Tensor(np.moveaxis(dd, 0, -1).reshape(s, n, 3))

    colors, fts, valid = [], [], []
    for i, (sc, img, ft) in enumerate(zip(srcs, imgs, feats)):
        uv_s, zs, front = cam.inverse_warp_pixels(uv, z, ref, sc)
        ok = front & footprint_valid(uv_s[0], uv_s[1], w, h)
        colors.append(bilinear_sample(img, uv_s[0], uv_s[1]))
        fts.append(bilinear_sample(ft, uv_s[0], uv_s[1]))
        valid.append(ok.reshape(-1))
    colors = ad.stack(colors, axis=1)                        # [S, N, 3]
    fts = ad.stack(fts, axis=1)                              # [S, N, C]
    valid = np.stack(valid, axis=1)                          # [S, N]

    if fusion_ctx is not None:
        if cfg.shared_volume:
            nb = fusion_ctx.volume_neighbors(state.volume, state.hyp, z, sl)
            feat_in = rf.fuse_volume_features(store, f_v, nb)
        else:
            feat_in = _pe_features(ref, uv, z)
        fused_c, fused_f = [], []
        for i in range(n):
            nc, nf, nv = fusion_ctx.source_neighbors(i, n_s, sl)
            fused_c.append(rf.fuse_colors(store, colors[:, i], nc, nv))
            fused_f.append(rf.fuse_feats(store, fts[:, i], nf, nv))
        colors = ad.stack(fused_c, axis=1)
        fts = ad.stack(fused_f, axis=1)
    elif cfg.shared_volume:
        feat_in = rf.layer_norm(f_v, store["vnorm.gain"], store["vnorm.bias"])
    else:
        feat_in = _pe_features(ref, uv, z)

    sigma, f_h = rf.density_mlp(store, feat_in, dd_flat)
    logits = rf.blend_logits(store, level, dd_views, f_h, colors, fts)
    r = rf.blend_color(logits, colors, valid)                # [S, 3]
    return sigma.reshape(n_p, n_s), r.reshape(n_p, n_s, 3)


def render_view(store: ParamStore, cfg: ModelConfig, target: cam.Camera,
                sources: Sequence, mode: str = "train", pixels=None,
                rays_per_level: int = 512, rng: np.random.Generator = None,
                bg: np.ndarray = None, literal_depth: bool = False,
                tile: int = 2048) -> RenderResult:
    """Run the cascade from a target camera against (image, camera) sources.

    mode='train' renders a pixel subset at every level (given explicitly
    via pixels={level: flat_indices} or sampled with rng); mode='test'
    renders the full final level only.  Colors/depths are Tensors wired
    for backprop in train mode.
    """
    if mode not in ("train", "test"):
        raise ShapeError(f"unknown mode {mode!r}")
    src_imgs = [np.asarray(img, dtype=np.float64) for img, _ in sources]
    src_cams = [c for _, c in sources]
    full_h, full_w = src_imgs[0].shape[1:]
    if bg is None:
        bg = np.zeros(3)

    pyramids = [extract_features(store, img) for img in src_imgs]
    result = RenderResult()
    prev_depth = None
    for level in (1, 2, 3):
        s = 2 ** (3 - level)
        h, w = full_h // s, full_w // s
        ref = target.scaled(s)
        srcs = [c.scaled(s) for c in src_cams]
        feats = [pyr[level - 1] for pyr in pyramids]
        imgs = [ad.as_tensor(area_downsample(im, s)) for im in src_imgs]

        near, far = ref.depth_range
        hyp = build_hypotheses(cfg, level, near, far, h, w, prev_depth)
        raw, valid = build_raw_volume(cfg, ref, srcs, feats, hyp)
        vol = regularize(store, level, raw)
        pred = predict_depth(store, level, vol, hyp)
        prev_depth = pred.depth.values                       # guidance only
        state = LevelState(level=level, height=h, width=w, hyp=hyp,
                           volume=vol, valid=valid, depth_pred=pred)
        result.levels.append(state)

        if mode == "test" and level < 3:
            continue
        if mode == "test":
            pix = np.arange(h * w)
        elif pixels is not None:
            pix = np.asarray(pixels[level], dtype=np.int64)
        else:
            if rng is None:
                raise ShapeError("train mode needs rng or explicit pixels")
            pix = rng.choice(h * w, size=min(rays_per_level, h * w),
                             replace=False)

        n_b = cfg.n_samples[level - 1]
        hyp_flat = hyp.reshape(hyp.shape[0], -1)
        sel_idx, z = select_samples(hyp_flat[:, pix],
                                    pred.depth.values.reshape(-1)[pix], n_b)

        fusion_ctx = None
        if cfg.fusion and level == 3:
            fusion_ctx = _FusionContext(store, cfg, state, ref, srcs, imgs,
                                        feats, pix)

        parts = []
        step = len(pix) if mode == "train" else max(1, tile)
        for lo in range(0, len(pix), step):
            sl = slice(lo, min(lo + step, len(pix)))
            sig, rad = _evaluate_field(store, cfg, level, state, ref, srcs,
                                       imgs, feats, pix[sl], z[sl],
                                       sel_idx[sl], fusion_ctx, sl)
            parts.append(ray_march(sig, rad, z[sl], bg=bg,
                                   literal_depth=literal_depth))
        out = {key: ad.concat([p[key] for p in parts], axis=0)
               if isinstance(parts[0][key], Tensor)
               else np.concatenate([p[key] for p in parts], axis=0)
               for key in parts[0]}
        state.pixels = pix
        state.sample_z = z
        state.sample_idx = sel_idx
        state.color = out["color"]
        state.depth = out["depth"]
        state.opacity = out["opacity"]
        state.weights = out["weights"]
        state.zero_flag = out["zero_flag"]
    return result
