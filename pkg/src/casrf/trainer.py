"""End-to-end optimization of the full pipeline.

Per step: pick a (target, sources) tuple, render a random pixel subset
through all three levels, combine the rendering loss with the
self-supervised depth loss at every level, and take one Adam step.
"""

from __future__ import annotations

import csv
import os
from typing import List, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad, set_default_dtype, get_default_dtype
from .config import TrainConfig
from .depth_head import mvs_loss
from .errors import DataError, NumericsError
from .metrics import psnr
from .model import ModelConfig, build_params
from .params import Adam, ParamStore
from .pyramid import area_downsample
from .renderer import LevelState, RenderResult, render_view
from .scene import SceneData


def render_loss(state: LevelState, gt_colors: np.ndarray, lam1: float,
                lam2: float, delta: float):
    """Eq.-style per-pixel loss for one level.

    gt_colors: [P, 3] ground truth at the rendered pixels.  The pseudo
    depth and confidence act as constants here: the depth term trains the
    renderer, never the depth head.  Zero-opacity pixels are excluded
    from the depth term.  Returns (loss, color_part, depth_part, n_gated).
    """
    pix = state.pixels
    d_pseudo = state.depth_pred.depth.values.reshape(-1)[pix]
    conf = state.depth_pred.confidence.values.reshape(-1)[pix]

    diff = state.color - gt_colors
    color_pp = ad.tsum(diff * diff, axis=1)                  # [P]
    gate = (conf > delta) & ~state.zero_flag
    gate_f = gate.astype(color_pp.values.dtype)
    depth_pp = ad.absolute(state.depth - d_pseudo) * gate_f

    loss = ad.tmean(color_pp * lam1 + depth_pp * lam2)
    c_part = lam1 * float(color_pp.values.mean())
    d_part = lam2 * float(depth_pp.values.mean())
    return loss, c_part, d_part, int(gate.sum())


def gate_counts(confidences: Sequence[np.ndarray], delta: float) -> int:
    """Number of pixels whose confidence exceeds delta, over all maps."""
    return int(sum((c > delta).sum() for c in confidences))


def total_loss(result: RenderResult, target_img: np.ndarray,
               target_cam, src_imgs: Sequence[np.ndarray], src_cams,
               tc: TrainConfig, lam2: float):
    """Sum of render and depth losses over the three levels.

    Returns (loss Tensor, components dict).
    """
    total = None
    comps = {}
    for state in result.levels:
        s = 2 ** (3 - state.level)
        gt_l = area_downsample(target_img, s)
        gt_pix = gt_l.reshape(3, -1).T[state.pixels]
        r_loss, c_part, d_part, n_gate = render_loss(
            state, gt_pix, tc.lam1, lam2, tc.delta)

        ref_c = target_cam.scaled(s)
        src_c = [c.scaled(s) for c in src_cams]
        imgs_l = [area_downsample(im, s) for im in src_imgs]
        m_loss, m_parts, _ = mvs_loss(gt_l, imgs_l, ref_c, src_c,
                                      state.depth_pred.depth)

        lvl = r_loss + m_loss * tc.lam3
        total = lvl if total is None else total + lvl
        comps[f"render_l{state.level}"] = c_part + d_part
        comps[f"mvs_l{state.level}"] = float(m_loss.values) * tc.lam3
        comps[f"color_l{state.level}"] = c_part
        comps[f"depth_l{state.level}"] = d_part
        comps[f"gated_l{state.level}"] = n_gate
    comps["total"] = float(total.values)
    return total, comps


def evaluate_view(store: ParamStore, mc: ModelConfig, scene: SceneData,
                  view: int, sources: Sequence[int], bg: np.ndarray,
                  tile: int = 1024):
    """Held-out render of one view; returns (psnr_db, image, depth, conf)."""
    with no_grad():
        res = render_view(
            store, mc, scene.cameras[view],
            [(scene.images[i], scene.cameras[i]) for i in sources],
            mode="test", bg=bg, tile=tile)
    st = res.final
    img = st.color.values.T.reshape(3, st.height, st.width)
    depth = st.depth.values.reshape(st.height, st.width)
    conf = st.depth_pred.confidence.values
    return psnr(np.clip(img, 0.0, 1.0), scene.images[view]), img, depth, conf


def _training_tuples(data: Sequence[SceneData], holdout: int):
    out = []
    for si, scene in enumerate(data):
        for row in scene.manifest:
            if row[0] == holdout:
                continue
            out.append((si, row[0], tuple(row[1:])))
    if not out:
        raise DataError("no training tuples left after holdout")
    return out


def holdout_sources(scene: SceneData, holdout: int):
    """Manifest sources of the held-out view (its own row)."""
    for row in scene.manifest:
        if row[0] == holdout:
            return tuple(row[1:])
    raise DataError(f"view {holdout} missing from manifest")


def train(data: List[SceneData], tc: TrainConfig, mc: ModelConfig,
          out_dir: str) -> dict:
    """Optimize all parameters; writes model.ckpt and train_log.csv.

    Deterministic in tc.seed.  Raises NumericsError (after dumping the
    offending batch description) if the loss goes non-finite.
    """
    os.makedirs(out_dir, exist_ok=True)
    prev_dtype = get_default_dtype()
    set_default_dtype(np.float32 if tc.precision == "fp32" else np.float64)
    try:
        return _train_inner(data, tc, mc, out_dir)
    finally:
        set_default_dtype(prev_dtype)


def _train_inner(data, tc: TrainConfig, mc: ModelConfig, out_dir: str) -> dict:
    store = build_params(mc)
    tuples = _training_tuples(data, tc.holdout_view)
    spe = tc.steps_per_epoch or len(tuples)
    total_steps = tc.epochs * spe
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 1]))
    adam = Adam(store, lr=tc.lr)
    bg = np.asarray(tc.background, dtype=np.float64)

    log_path = os.path.join(out_dir, "train_log.csv")
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    fields = ["step", "lr", "lam2", "render_l1", "render_l2", "render_l3",
              "mvs_l1", "mvs_l2", "mvs_l3", "total", "eval_psnr"]
    last_eval = ""
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for step in range(total_steps):
            epoch = step // spe + 1
            halvings = sum(1 for m in tc.lr_milestones if epoch > m)
            adam.lr = tc.lr * (0.5 ** halvings)
            if total_steps > 1:
                lam2 = tc.lam2_start + (tc.lam2_end - tc.lam2_start) * (
                    step / (total_steps - 1))
            else:
                lam2 = tc.lam2_start

            si, ti, srcs = tuples[rng.integers(len(tuples))]
            scene = data[si]
            sources = [(scene.images[i], scene.cameras[i]) for i in srcs]
            result = render_view(store, mc, scene.cameras[ti], sources,
                                 mode="train", rays_per_level=tc.rays_per_step,
                                 rng=rng, bg=bg)
            loss, comps = total_loss(
                result, scene.images[ti], scene.cameras[ti],
                [scene.images[i] for i in srcs],
                [scene.cameras[i] for i in srcs], tc, lam2)

            if not np.isfinite(comps["total"]):
                dump = os.path.join(out_dir, "nan_dump.txt")
                with open(dump, "w") as dh:
                    dh.write(f"step={step}\nscene={si}\ntarget={ti}\n"
                             f"sources={srcs}\ncomponents={comps}\n")
                    for st in result.levels:
                        dh.write(f"level{st.level}_pixels="
                                 f"{st.pixels.tolist()}\n")
                raise NumericsError(
                    f"non-finite loss at step {step}; batch dumped to {dump}")

            store.zero_grad()
            loss.backward()
            adam.step()

            row = [step, f"{adam.lr:.8g}", f"{lam2:.8g}"]
            row += [f"{comps[f'render_l{l}']:.8g}" for l in (1, 2, 3)]
            row += [f"{comps[f'mvs_l{l}']:.8g}" for l in (1, 2, 3)]
            row += [f"{comps['total']:.8g}"]
            is_epoch_end = (step + 1) % spe == 0
            if is_epoch_end:
                db, _, _, _ = evaluate_view(
                    store, mc, data[0], tc.holdout_view,
                    holdout_sources(data[0], tc.holdout_view), bg)
                last_eval = f"{db:.4f}"
                row.append(last_eval)
            else:
                row.append("")
            writer.writerow(row)
            fh.flush()

    store.save(ckpt_path)
    return {"steps": total_steps, "checkpoint": ckpt_path, "log": log_path,
            "eval_psnr": float(last_eval) if last_eval else None,
            "store": store}
