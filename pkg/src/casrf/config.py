"""Plain-text configuration: key=value files plus override dictionaries.

One flat namespace covers training and model fields; the shared `seed`
key drives both parameter initialization and data sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Tuple

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class TrainConfig:
    lam1: float = 1.0
    lam3: float = 1.0
    lam2_start: float = 1e-4
    lam2_end: float = 1e-2
    delta: float = 0.5
    rays_per_step: int = 512
    lr: float = 5e-4
    lr_milestones: Tuple[int, ...] = (2, 4, 8)
    epochs: int = 8
    steps_per_epoch: int = 0        # 0 -> one pass over the manifest tuples
    seed: int = 0
    precision: str = "fp64"         # or fp32
    holdout_view: int = 0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must lie in [0, 1], got {self.delta}")
        if self.precision not in ("fp32", "fp64"):
            raise ConfigError(f"precision must be fp32 or fp64, "
                              f"got {self.precision!r}")
        if self.lam2_end < self.lam2_start:
            raise ConfigError("lam2 schedule must be nondecreasing")
        if self.epochs < 1 or self.rays_per_step < 1:
            raise ConfigError("epochs and rays_per_step must be positive")


def _coerce(name: str, kind, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        # tuple fields: comma-separated numbers
        parts = [p for p in text.split(",") if p.strip()]
        elem = float if name in ("alphas", "betas", "background") else int
        return tuple(elem(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}")


_KINDS = {
    "lam1": float, "lam3": float, "lam2_start": float, "lam2_end": float,
    "delta": float, "rays_per_step": int, "lr": float, "lr_milestones": tuple,
    "epochs": int, "steps_per_epoch": int, "seed": int, "precision": str,
    "holdout_view": int, "background": tuple,
    "n_sources": int, "channels": tuple, "n_hyp": tuple, "n_samples": tuple,
    "alphas": tuple, "betas": tuple, "cv": int, "hidden": int,
    "fusion": bool, "shared_volume": bool, "fusion_k": int,
    "max_offset": float,
}


def parse_config_file(path) -> dict:
    """Read key=value lines; '#' starts a comment; blank lines ignored."""
    out = {}
    with open(path, "r") as fh:
        for ln, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{ln}: expected key=value")
            key, val = text.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def build_configs(file_values: dict = None, overrides: dict = None):
    """Merge defaults <- config file <- overrides into typed configs.

    Unknown keys raise ConfigError naming the key.  Returns
    (TrainConfig, ModelConfig).
    """
    tc = TrainConfig()
    mc = ModelConfig()
    train_names = {f.name for f in fields(TrainConfig)}
    model_names = {f.name for f in fields(ModelConfig)}
    for source in (file_values or {}), (overrides or {}):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in _KINDS:
                raise ConfigError(f"unknown config key: {key}")
            val = _coerce(key, _KINDS[key], raw)
            if key in train_names:
                setattr(tc, key, val)
            if key in model_names:
                setattr(mc, key, val)
            if key == "seed":
                mc.seed = int(val)
    tc.validate()
    mc.validate()
    return tc, mc


def effective_config_text(tc: TrainConfig, mc: ModelConfig) -> str:
    """Render the full effective configuration as sorted key=value lines."""
    rows = {}
    for f in fields(TrainConfig):
        rows[f.name] = getattr(tc, f.name)
    for f in fields(ModelConfig):
        rows.setdefault(f.name, getattr(mc, f.name))
    lines = []
    for key in sorted(rows):
        val = rows[key]
        if isinstance(val, tuple):
            val = ",".join(repr(v) if isinstance(v, float) else str(v)
                           for v in val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"
