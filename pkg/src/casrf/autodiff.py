"""Reverse-mode automatic differentiation on numpy arrays.

Define-by-run tape: every operation on Tensors records a backward closure
and its parent tensors.  Calling ``backward()`` on a scalar walks the graph
in reverse topological order and accumulates gradients into leaf tensors.

Conventions:
  * one global floating dtype (float64 by default, float32 as a fast mode)
  * trailing-dimension (numpy) broadcasting only
  * leaf gradients accumulate across backward calls until cleared
  * a graph is consumed by backward; reusing it raises GraphError
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import BroadcastError, GraphError, NumericsError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_DEBUG_NUMERICS = False


def set_default_dtype(dtype) -> None:
    """Set the global floating dtype ('float64' or 'float32')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return np.dtype(_DEFAULT_DTYPE)


def debug_numerics(enabled: bool) -> None:
    """Toggle per-op finiteness checks (slow; for debugging)."""
    global _DEBUG_NUMERICS
    _DEBUG_NUMERICS = bool(enabled)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _DEBUG_NUMERICS and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of an operand that was broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    ``values`` is the underlying ndarray; treat it as read-only.  ``grad``
    is None until a backward pass deposits something, then an ndarray of
    the same shape.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_bwd", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.values = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple = ()
        self._bwd = None
        self._freed = False

    # -- construction -------------------------------------------------

    @staticmethod
    def _make(values: np.ndarray, parents: Sequence["Tensor"], bwd) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = values
        out.grad = None
        out._freed = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
        return out

    # -- basic introspection -------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    def numpy(self) -> np.ndarray:
        """Copy of the values as a plain ndarray."""
        return self.values.copy()

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, severed from the graph."""
        out = Tensor.__new__(Tensor)
        out.values = self.values
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
        out._freed = False
        return out

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        if self.values.size != 1:
            raise ShapeError("backward requires a scalar tensor")
        if not self.requires_grad:
            raise GraphError("backward on a tensor that does not require grad")
        if self._freed:
            raise GraphError("backward through an already-consumed graph")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._freed:
                raise GraphError("backward through an already-consumed graph")
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.values)
        }
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._bwd is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.values)
                node.grad += g
            else:
                for parent, pg in node._bwd(g):
                    if not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = pg if pg.flags.owndata else pg.copy()
                    else:
                        acc += pg
        for node in topo:
            if node._bwd is not None:
                node._freed = True
                node._bwd = None
                node._parents = ()

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def _binary(a, b, fwd, bwd_a, bwd_b, name: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise BroadcastError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from e
    out = fwd(a.values, b.values)
    _check_finite(out, name)

    def bwd(g):
        return (
            (a, _unbroadcast(bwd_a(g, a.values, b.values, out), a.shape)),
            (b, _unbroadcast(bwd_b(g, a.values, b.values, out), b.shape)),
        )

    return Tensor._make(out, (a, b), bwd)


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g, "add")


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g, "sub")


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
        "div",
    )


def maximum(a, b):
    """Elementwise max; gradient to the larger operand (ties go to the first)."""
    return _binary(
        a, b, np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
        "maximum",
    )


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def _unary(a, fwd, bwd_fn, name: str) -> Tensor:
    a = as_tensor(a)
    out = fwd(a.values)
    _check_finite(out, name)

    def bwd(g):
        return ((a, bwd_fn(g, a.values, out)),)

    return Tensor._make(out, (a,), bwd)


def neg(a):
    return _unary(a, np.negative, lambda g, x, o: -g, "neg")


def exp(a):
    return _unary(a, np.exp, lambda g, x, o: g * o, "exp")


def log(a):
    return _unary(a, np.log, lambda g, x, o: g / x, "log")


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, o: 0.5 * g / o, "sqrt")


def absolute(a):
    return _unary(a, np.abs, lambda g, x, o: g * np.sign(x), "abs")


def power(a, p: float):
    p = float(p)
    return _unary(a, lambda x: x ** p, lambda g, x, o: g * p * x ** (p - 1.0), "power")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0), "relu")


def sigmoid(a):
    # 0.5 * (1 + tanh(x/2)) avoids overflow at both tails
    return _unary(
        a,
        lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),
        lambda g, x, o: g * o * (1.0 - o),
        "sigmoid",
    )


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o), "tanh")


def softplus(a):
    return _unary(
        a,
        lambda x: np.logaddexp(0.0, x),
        lambda g, x, o: g * (0.5 * (1.0 + np.tanh(0.5 * x))),
        "softplus",
    )


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes through the unclamped interior."""
    return _unary(
        a,
        lambda x: np.clip(x, lo, hi),
        lambda g, x, o: g * ((x >= lo) & (x <= hi)),
        "clip",
    )


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)
    out = np.asarray(out)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return ((a, np.broadcast_to(gg, a.shape)),)

    return Tensor._make(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = np.asarray(a.values.mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return ((a, np.broadcast_to(gg / n, a.shape)),)

    return Tensor._make(out, (a,), bwd)


def tmax(a, axis=None, keepdims=False):
    """Max reduction; gradient flows to the first maximal element per lane."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    if len(axes) != 1 and axis is not None:
        raise ShapeError("max supports a single axis or full reduction")
    out = np.asarray(a.values.max(axis=None if axis is None else axes[0], keepdims=keepdims))

    def bwd(g):
        if axis is None:
            mask = np.zeros_like(a.values)
            mask.flat[np.argmax(a.values)] = 1.0
            return ((a, mask * g.reshape(())),)
        ax = axes[0]
        idx = np.expand_dims(np.argmax(a.values, axis=ax), ax)
        gg = g if keepdims else np.expand_dims(g, ax)
        buf = np.zeros_like(a.values)
        np.put_along_axis(buf, idx, gg, ax)
        return ((a, buf),)

    return Tensor._make(out, (a,), bwd)


def softmax(a, axis: int = -1):
    a = as_tensor(a)
    x = a.values
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)
    _check_finite(out, "softmax")

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((a, out * (g - dot)),)

    return Tensor._make(out, (a,), bwd)


def cumsum(a, axis: int):
    a = as_tensor(a)
    out = np.cumsum(a.values, axis=axis)

    def bwd(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return ((a, rev),)

    return Tensor._make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    out = a.values.reshape(shape)

    def bwd(g):
        return ((a, g.reshape(old)),)

    return Tensor._make(out, (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = a.values.transpose(axes)

    def bwd(g):
        return ((a, g.transpose(inv)),)

    return Tensor._make(out, (a,), bwd)


def moveaxis(a, src: int, dst: int):
    a = as_tensor(a)
    out = np.moveaxis(a.values, src, dst)

    def bwd(g):
        return ((a, np.moveaxis(g, dst, src)),)

    return Tensor._make(out, (a,), bwd)


def concat(parts: Iterable[Tensor], axis: int = 0):
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(a, b)
            outs.append((p, g[tuple(sl)]))
        return tuple(outs)

    return Tensor._make(out, tuple(parts), bwd)


def stack(parts: Iterable[Tensor], axis: int = 0):
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.values for p in parts], axis=axis)

    def bwd(g):
        pieces = np.moveaxis(g, axis, 0)
        return tuple((p, pieces[i]) for i, p in enumerate(parts))

    return Tensor._make(out, tuple(parts), bwd)


def getitem(a, idx):
    """Basic indexing (ints, slices, tuples thereof)."""
    a = as_tensor(a)
    out = a.values[idx]

    def bwd(g):
        buf = np.zeros_like(a.values)
        buf[idx] += g
        return ((a, buf),)

    return Tensor._make(np.ascontiguousarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# gathers (integer indices are plain ndarrays, not differentiable)
# ---------------------------------------------------------------------------


def gather_rows(a, idx: np.ndarray):
    """out[i, :] = a[idx[i], :] for a 2-D tensor; scatter-add backward."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index array")
    out = a.values[idx]
    n = a.shape[0]

    def bwd(g):
        buf = np.empty_like(a.values)
        for c in range(a.shape[1]):
            buf[:, c] = np.bincount(idx, weights=g[:, c], minlength=n)
        return ((a, buf),)

    return Tensor._make(out, (a,), bwd)


def gather_depth(a, idx: np.ndarray):
    """Select hypotheses along axis 1 of a [C, D, H, W] tensor.

    idx has shape [D', H, W]; out[c, k, h, w] = a[c, idx[k, h, w], h, w].
    """
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError("gather_depth expects a [C, D, H, W] tensor")
    c, d, h, w = a.shape
    idx = np.asarray(idx)
    if idx.ndim != 3 or idx.shape[1:] != (h, w):
        raise ShapeError("gather_depth index must be [D', H, W]")
    out = np.take_along_axis(a.values, idx[None], axis=1)
    flat = (idx * (h * w) + np.arange(h * w).reshape(h, w)).ravel()

    def bwd(g):
        buf = np.empty_like(a.values)
        gf = g.reshape(c, -1)
        for ch in range(c):
            buf[ch] = np.bincount(flat, weights=gf[ch], minlength=d * h * w).reshape(d, h, w)
        return ((a, buf),)

    return Tensor._make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product.

    Supported: 2-D @ 2-D, N-D @ 2-D (a linear map over the last axis), and
    N-D @ N-D with identical batch dimensions.
    """
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dims {av.shape} @ {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError("matmul: batch dims must match exactly")
    out = np.matmul(av, bv)
    _check_finite(out, "matmul")

    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        out = []
        if need_a:
            if bv.ndim == 2:
                out.append((a, np.matmul(g, bv.T)))
            else:
                out.append((a, np.matmul(g, np.swapaxes(bv, -1, -2))))
        if need_b:
            if bv.ndim == 2:
                gb = np.matmul(av.reshape(-1, av.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(av, -1, -2), g)
            out.append((b, gb))
        return tuple(out)

    return Tensor._make(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolutions (zero padding, im2col + one GEMM per layer)
# ---------------------------------------------------------------------------


def _im2col2d(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=xp.dtype)
    t = 0
    for ki in range(kh):
        for kj in range(kw):
            sl = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
            cols[:, t * c:(t + 1) * c, :] = sl.reshape(n, c, ho * wo)
            t += 1
    return cols


def conv2d(x, w, stride: int = 1, pad: int = 0):
    """2-D convolution: x [N, C, H, W], w [O, C, kh, kw] -> [N, O, Ho, Wo]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x [N,C,H,W] and w [O,C,kh,kw]")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: {c} vs {c2}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d output would be empty")
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.values
    # tap-major layout: cols rows are ordered (tap, channel)
    cols = _im2col2d(xp, kh, kw, stride, ho, wo)
    wmat = w.values.transpose(2, 3, 0, 1).reshape(kh * kw, o, c)
    wflat = np.ascontiguousarray(wmat.transpose(1, 0, 2).reshape(o, kh * kw * c))
    out = np.matmul(wflat, cols).reshape(n, o, ho, wo)
    _check_finite(out, "conv2d")
    keep_cols = cols if _GRAD_ENABLED and (x.requires_grad or w.requires_grad) else None

    need_x, need_w = x.requires_grad, w.requires_grad

    def bwd(g):
        gf = g.reshape(n, o, ho * wo)
        out_grads = []
        if need_x:
            gcols = np.matmul(wflat.T, gf)  # [n, khkw*c, ho*wo]
            gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            t = 0
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += \
                        gcols[:, t * c:(t + 1) * c, :].reshape(n, c, ho, wo)
                    t += 1
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            out_grads.append((x, gx))
        if need_w:
            gw = np.matmul(gf, keep_cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(o, kh * kw, c).transpose(0, 2, 1)
            out_grads.append((w, np.ascontiguousarray(gw.reshape(o, c, kh, kw))))
        return tuple(out_grads)

    return Tensor._make(out, (x, w), bwd)


def conv3d(x, w, pad: int = 1):
    """3-D convolution with stride 1: x [C, D, H, W], w [O, C, 3, 3, 3]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError("conv3d expects x [C,D,H,W] and w [O,C,kd,kh,kw]")
    c, d, h, wd = x.shape
    o, c2, kd, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv3d channel mismatch: {c} vs {c2}")
    do, ho, wo = d + 2 * pad - kd + 1, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if min(do, ho, wo) <= 0:
        raise ShapeError("conv3d output would be empty")
    xp = np.pad(x.values, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.values
    ntap = kd * kh * kw
    nvox = do * ho * wo
    cols = np.empty((ntap * c, nvox), dtype=xp.dtype)
    t = 0
    for ki in range(kd):
        for kj in range(kh):
            for kk in range(kw):
                cols[t * c:(t + 1) * c, :] = xp[:, ki:ki + do, kj:kj + ho, kk:kk + wo].reshape(c, nvox)
                t += 1
    wflat = np.ascontiguousarray(
        w.values.transpose(0, 2, 3, 4, 1).reshape(o, ntap * c)
    )
    out = (wflat @ cols).reshape(o, do, ho, wo)
    _check_finite(out, "conv3d")
    keep_cols = cols if _GRAD_ENABLED and (x.requires_grad or w.requires_grad) else None

    need_x, need_w = x.requires_grad, w.requires_grad

    def bwd(g):
        gf = g.reshape(o, nvox)
        out_grads = []
        if need_x:
            gcols = wflat.T @ gf
            gxp = np.zeros((c, d + 2 * pad, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            t = 0
            for ki in range(kd):
                for kj in range(kh):
                    for kk in range(kw):
                        gxp[:, ki:ki + do, kj:kj + ho, kk:kk + wo] += \
                            gcols[t * c:(t + 1) * c, :].reshape(c, do, ho, wo)
                        t += 1
            gx = gxp[:, pad:pad + d, pad:pad + h, pad:pad + wd] if pad else gxp
            out_grads.append((x, gx))
        if need_w:
            gw = (gf @ keep_cols.T).reshape(o, ntap, c).transpose(0, 2, 1)
            out_grads.append((w, np.ascontiguousarray(gw.reshape(o, c, kd, kh, kw))))
        return tuple(out_grads)

    return Tensor._make(out, (x, w), bwd)
