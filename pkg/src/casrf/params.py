"""Model parameter registry, initialization, and the Adam optimizer.

Every parameter has a stable dotted name.  Initialization is seeded per
name (global seed mixed with a hash of the name), so adding or removing
unrelated parameters never perturbs the others, and checkpoints stay
reproducible across construction orders.
"""

from __future__ import annotations

import hashlib
from typing import Dict, Iterable

import numpy as np

from .autodiff import Tensor, get_default_dtype
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError


def _name_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")]))


class ParamStore:
    """Named parameter tensors with group bookkeeping."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.tensors: Dict[str, Tensor] = {}

    def add(self, name: str, shape, init: str = "fan_in", fan_in: int = None):
        """Create one parameter.

        init: 'fan_in' (uniform Kaiming-style), 'zeros', or 'ones'.
        """
        if name in self.tensors:
            raise CheckpointError(f"duplicate parameter {name}")
        if init == "zeros":
            vals = np.zeros(shape)
        elif init == "ones":
            vals = np.ones(shape)
        else:
            if fan_in is None:
                raise ValueError(f"{name}: fan_in required for fan_in init")
            bound = np.sqrt(6.0 / fan_in)
            vals = _name_rng(self.seed, name).uniform(-bound, bound, shape)
        t = Tensor(vals, requires_grad=True)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return sorted(self.tensors)

    def group(self, prefix: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items()
                if k == prefix or k.startswith(prefix + ".")}

    def groups(self) -> Dict[str, Dict[str, Tensor]]:
        out: Dict[str, Dict[str, Tensor]] = {}
        for k, v in self.tensors.items():
            out.setdefault(k.split(".")[0], {})[k] = v
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def cast_(self, dtype) -> None:
        for t in self.tensors.values():
            t.values = t.values.astype(dtype)

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.values for k, v in self.tensors.items()})

    def load(self, path) -> None:
        """Load values into existing parameters; inventories must match."""
        loaded = load_checkpoint(path)
        mine = set(self.tensors)
        theirs = set(loaded)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise CheckpointError(
                f"parameter inventory mismatch: missing={missing} extra={extra}")
        dt = get_default_dtype()
        for k, arr in loaded.items():
            if arr.shape != self.tensors[k].values.shape:
                raise CheckpointError(
                    f"{k}: shape {arr.shape} != {self.tensors[k].values.shape}")
            self.tensors[k].values = arr.astype(dt)


class Adam:
    """Standard Adam over a ParamStore (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, store: ParamStore, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.values) for k, v in store.tensors.items()}
        self.v = {k: np.zeros_like(v.values) for k, v in store.tensors.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.store.tensors.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / bc1
            vh = self.v[k] / bc2
            p.values = p.values - self.lr * mh / (np.sqrt(vh) + self.eps)
