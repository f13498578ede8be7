"""Command-line entry point.

Subcommands: gen-data, train, render, fuse, eval, ablate.  Every train
flag has a config-file equivalent (key=value lines); flags override the
file.  The effective configuration is echoed into the output directory so
any run is reproducible from (config, seed, dataset).

Exit codes: 0 success, 2 config, 3 data, 4 checkpoint, 5 geometry,
6 numerics, 7 empty overlap, 8 contract/shape, 9 I/O, 1 other errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import imageio as iio
from . import metrics as mx
from .autodiff import no_grad, set_default_dtype, get_default_dtype
from .config import (TrainConfig, build_configs, effective_config_text,
                     parse_config_file)
from .errors import (CasrfError, CheckpointError, ConfigError, ContractError,
                     DataError, EmptyOverlapError, GeometryError,
                     NumericsError, ShapeError)
from .model import ModelConfig, build_params
from .renderer import render_view
from .scene import emit_dataset, generate_scene, load_dataset
from .trainer import evaluate_view, holdout_sources, train

EXIT_CODES = (
    (ConfigError, 2), (DataError, 3), (CheckpointError, 4),
    (GeometryError, 5), (NumericsError, 6), (EmptyOverlapError, 7),
    (ContractError, 8), (ShapeError, 8), (OSError, 9), (CasrfError, 1),
)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--delta", type=float, help="confidence gate for depth loss")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int, dest="steps_per_epoch")
    p.add_argument("--rays-per-step", type=int, dest="rays_per_step")
    p.add_argument("--precision", choices=("fp32", "fp64"))
    p.add_argument("--no-fusion", action="store_true",
                   help="disable neighbor feature fusion")
    p.add_argument("--no-shared-volume", action="store_true",
                   help="replace volume features with positional encoding")


def _configs_from_args(args) -> tuple:
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {}
    for key in ("seed", "delta", "epochs", "steps_per_epoch",
                "rays_per_step", "precision"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "no_fusion", False):
        overrides["fusion"] = False
    if getattr(args, "no_shared_volume", False):
        overrides["shared_volume"] = False
    return build_configs(file_values, overrides)


def _load_store(ckpt: str, mc: ModelConfig):
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    store = build_params(mc)
    store.load(ckpt)
    return store


def _scene_dirs(root: str):
    subs = sorted(d for d in os.listdir(root)
                  if os.path.isdir(os.path.join(root, d))
                  and d.startswith("scene_"))
    if not subs:
        raise DataError(f"no scene_* directories under {root}")
    return [os.path.join(root, d) for d in subs]


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.scenes):
        scene = generate_scene(args.seed + i, args.difficulty,
                               n_views=args.views, height=args.height,
                               width=args.width,
                               texture_poor=args.texture_poor)
        emit_dataset(scene, os.path.join(args.out, f"scene_{i:04d}"))
    print(f"wrote {args.scenes} scene(s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    tc, mc = _configs_from_args(args)
    data = [load_dataset(d) for d in _scene_dirs(args.data)]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(effective_config_text(tc, mc))
    info = train(data, tc, mc, args.out)
    print(f"trained {info['steps']} steps -> {info['checkpoint']}")
    if info["eval_psnr"] is not None:
        print(f"holdout psnr: {info['eval_psnr']:.2f} dB")
    return 0


def _set_precision(tc: TrainConfig):
    set_default_dtype(np.float32 if tc.precision == "fp32" else np.float64)


def cmd_render(args) -> int:
    tc, mc = _configs_from_args(args)
    prev = get_default_dtype()
    _set_precision(tc)
    try:
        scene = load_dataset(args.data)
        store = _load_store(args.checkpoint, mc)
        os.makedirs(args.out, exist_ok=True)
        bg = np.asarray(tc.background, dtype=np.float64)
        views = ([int(v) for v in args.views.split(",")] if args.views
                 else [row[0] for row in scene.manifest])
        tile = 1024 * max(1, args.threads)
        for target in views:
            srcs = holdout_sources(scene, target)
            with no_grad():
                res = render_view(
                    store, mc, scene.cameras[target],
                    [(scene.images[i], scene.cameras[i]) for i in srcs],
                    mode="test", bg=bg, tile=tile)
            st = res.final
            img = st.color.values.T.reshape(3, st.height, st.width)
            depth = st.depth.values.reshape(st.height, st.width)
            iio.save_ppm(os.path.join(args.out, f"rgb_{target:02d}.ppm"),
                         np.clip(img, 0.0, 1.0))
            iio.save_pfm(os.path.join(args.out, f"depth_{target:02d}.pfm"),
                         depth)
            iio.save_pfm(os.path.join(args.out, f"conf_{target:02d}.pfm"),
                         st.depth_pred.confidence.values)
        print(f"rendered {len(views)} view(s) to {args.out}")
        return 0
    finally:
        set_default_dtype(prev)


def cmd_fuse(args) -> int:
    scene = load_dataset(args.data)
    views = []
    images = []
    for vi, camera in enumerate(scene.cameras):
        dp = os.path.join(args.depths, f"depth_{vi:02d}.pfm")
        if not os.path.exists(dp):
            continue
        depth = iio.load_pfm(dp)
        cp = os.path.join(args.depths, f"conf_{vi:02d}.pfm")
        conf = iio.load_pfm(cp) if os.path.exists(cp) else None
        views.append((depth, conf, camera))
        images.append(scene.images[vi])
    if len(views) < 2:
        raise DataError(f"need at least two depth maps in {args.depths}")
    pts, cols = mx.fuse_depths(views, n_consistent=args.min_consistent,
                               eps_px=args.eps_px, eps_rel=args.eps_rel,
                               conf_min=args.conf_min, images=images)
    pts, idx = np.unique(pts, axis=0, return_index=True)
    cols = cols[idx]
    iio.save_ply(args.out, pts, cols)
    print(f"fused {len(pts)} points -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    scene = load_dataset(args.data)
    rows = []
    near = min(c.depth_range[0] for c in scene.cameras)
    far = max(c.depth_range[1] for c in scene.cameras)
    rng_depth = far - near
    taus = [float(t) / 100.0 * rng_depth
            for t in args.threshold_pcts.split(",")]
    for vi in range(len(scene.cameras)):
        rp = os.path.join(args.renders, f"rgb_{vi:02d}.ppm")
        if not os.path.exists(rp):
            continue
        img = iio.load_ppm(rp)
        row = {"view": vi, "psnr": mx.psnr(img, scene.images[vi]),
               "ssim": mx.ssim(img, scene.images[vi])}
        dp = os.path.join(args.renders, f"depth_{vi:02d}.pfm")
        if os.path.exists(dp):
            depth = iio.load_pfm(dp)
            mask = scene.masks[vi]
            abs_err, acc = mx.depth_metrics(depth, scene.depths[vi], mask,
                                            taus)
            row["depth_abs_err"] = abs_err
            for t, v in acc.items():
                row[f"acc@{t:.6g}"] = v
        rows.append(row)
    if not rows:
        raise DataError(f"no rendered views found in {args.renders}")

    keys = sorted({k for r in rows for k in r} - {"view"})
    lines = []
    for r in rows:
        for k in keys:
            if k in r:
                lines.append(f"view{r['view']}.{k}={r[k]:.6g}")
    for k in keys:
        vals = [r[k] for r in rows if k in r and np.isfinite(r[k])]
        if vals:
            lines.append(f"mean.{k}={float(np.mean(vals)):.6g}")
    text = "\n".join(lines) + "\n"
    with open(args.out, "w") as fh:
        fh.write(text)
    with open(args.out + ".csv", "w") as fh:
        fh.write(",".join(["view"] + keys) + "\n")
        for r in rows:
            cells = [str(r["view"])]
            cells += [f"{r[k]:.6g}" if k in r else "" for k in keys]
            fh.write(",".join(cells) + "\n")
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    base = ["--data", args.data, "--seed", str(args.seed),
            "--epochs", str(args.epochs),
            "--steps-per-epoch", str(args.steps), "--precision", "fp32"]
    if args.mode == "delta":
        variants = [("delta05", ["--delta", "0.5"]),
                    ("delta10", ["--delta", "1.0"])]
    elif args.mode == "fusion":
        variants = [("fusion", []), ("no_fusion", ["--no-fusion"])]
    else:
        variants = [("shared", []), ("no_shared", ["--no-shared-volume"])]
    results = {}
    for name, extra in variants:
        out = os.path.join(args.out, name)
        code = main(["train"] + base + ["--out", out] + extra)
        if code != 0:
            return code
        results[name] = out
    report = os.path.join(args.out, "ablate_report.txt")
    with open(report, "w") as fh:
        for name, out in results.items():
            with open(os.path.join(out, "train_log.csv")) as lg:
                last = [ln for ln in lg.read().splitlines() if ln][-1]
            fh.write(f"{name}: last_log={last}\n")
    print(f"ablation report -> {report}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="casrf",
        description="Cascaded source-blended radiance fields with "
                    "pseudo-depth guidance and neighbor fusion.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--difficulty", default="shapes",
                   choices=("plane", "shapes", "cluttered"))
    g.add_argument("--scenes", type=int, default=1)
    g.add_argument("--views", type=int, default=6)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=80)
    g.add_argument("--texture-poor", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render manifest target views")
    r.add_argument("--data", required=True, help="one scene directory")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--views", help="comma-separated view indices")
    r.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    _add_config_flags(r)
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("fuse", help="fuse depth maps into a point cloud")
    f.add_argument("--data", required=True, help="one scene directory")
    f.add_argument("--depths", required=True,
                   help="directory with depth_VV.pfm (+ optional conf_VV.pfm)")
    f.add_argument("--out", required=True, help="output PLY path")
    f.add_argument("--min-consistent", type=int, default=2)
    f.add_argument("--eps-px", type=float, default=1.0)
    f.add_argument("--eps-rel", type=float, default=0.01)
    f.add_argument("--conf-min", type=float, default=0.5)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="score renders against ground truth")
    e.add_argument("--data", required=True, help="one scene directory")
    e.add_argument("--renders", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--threshold-pcts", default="0.5,2.5",
                   help="depth accuracy thresholds, %% of depth range")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a paired ablation training")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--mode", required=True,
                   choices=("delta", "fusion", "volume"))
    a.add_argument("--steps", type=int, default=30)
    a.add_argument("--epochs", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(c for c, _ in EXIT_CODES) as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
