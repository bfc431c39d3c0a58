"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy buffers (f32 for training, f64 for gradient
checks). Ops record backward rules on a per-forward-pass tape; the tape is
freed after `backward`. Tensors are immutable values after construction —
there is no in-place op surface, and the optimizer swaps buffers between
forward passes rather than mutating live ones.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf


class ContractViolation(ValueError):
    """An operation was called outside its contract (shape, dtype, range)."""


class NumericFault(RuntimeError):
    """A non-finite value surfaced where the update rules forbid one."""


_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    """Dense row-major real array, optionally tracked by the active tape.

    `requires_grad` marks a leaf (parameter). Gradient only ever flows into
    a leaf while a tape is active; a tensor used outside any tape never
    receives gradient.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_NAME_DTYPES.get(dtype, dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data.astype(_NAME_DTYPES[dtype]), requires_grad=False)

    # Arithmetic sugar; scalars are folded without tape growth where possible.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise ContractViolation("tensor/tensor division is not part of the op suite")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Recording of one forward pass; consumed (and freed) by `backward`.

    Confined to one worker: the active-tape pointer is thread-local.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, object]] = []
        self._tracked: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().remove(self)
        return False

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _note(self, t: Tensor) -> bool:
        """Register `t` if it participates in differentiation; return tracked?"""
        if id(t) in self._tracked:
            return True
        if t.requires_grad:
            self._tracked.add(id(t))
            self._leaves[id(t)] = t
            return True
        return False

    def record(self, out: Tensor, parents: tuple, bwd) -> None:
        self._nodes.append((out, parents, bwd))
        self._tracked.add(id(out))

    def free(self) -> None:
        self._nodes.clear()
        self._tracked.clear()
        self._leaves.clear()


_TLS = threading.local()


def _stack() -> list:
    if not hasattr(_TLS, "tapes"):
        _TLS.tapes = []
    return _TLS.tapes


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _trace(out: Tensor, parents: tuple, bwd) -> Tensor:
    """Record `out = op(parents)` on the active tape when any parent is tracked."""
    tape = active_tape()
    if tape is None:
        return out
    tracked = False
    for p in parents:
        if isinstance(p, Tensor) and tape._note(p):
            tracked = True
    if tracked:
        tape.record(out, parents, bwd)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, Tensor]:
    """Reverse sweep from a scalar loss.

    Returns a gradient map over every tape leaf (parameter handle -> Tensor);
    leaves that do not contribute to the loss receive zeros. The tape is
    freed afterwards.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractViolation("backward() requires an active or explicit tape")
    if loss.data.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, bwd in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pgrad in zip(parents, bwd(g)):
            if pgrad is None or not isinstance(parent, Tensor):
                continue
            if not tape.tracks(parent):
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pgrad if acc is None else acc + pgrad
    result: dict[Tensor, Tensor] = {}
    for tid, leaf in tape._leaves.items():
        g = grads.get(tid)
        gt = Tensor(g if g is not None else np.zeros_like(leaf.data))
        leaf.grad = gt
        result[leaf] = gt
    tape.free()
    return result


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractViolation(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b, "add")
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ContractViolation(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _trace(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b, "sub")
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ContractViolation(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _trace(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b, "mul")
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ContractViolation(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _trace(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _trace(out, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype))
    return _trace(out, (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    out = Tensor(out_data)
    return _trace(out, (a,), lambda g: (g * out_data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through strictly inside the range."""
    out = Tensor(np.clip(a.data, lo, hi))
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)
    return _trace(out, (a,), lambda g: (g * inside,))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = Tensor((x * phi).astype(x.dtype, copy=False))

    def bwd(g):
        dens = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (phi + x * dens).astype(x.dtype, copy=False),)

    return _trace(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ContractViolation(f"reshape: {a.shape} -> {shape} (size mismatch)")
    return _trace(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ContractViolation(f"permute: axes {axes} invalid for rank {a.ndim}")
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _trace(out, (a,), lambda g: (g.transpose(inv),))


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing only (slices and ints); never overlapping, exact backward."""
    out = Tensor(np.ascontiguousarray(a.data[key]))

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g.reshape(ga[key].shape)
        return (ga,)

    return _trace(out, (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    except ValueError:
        raise ContractViolation(
            f"concat: shapes {[p.shape for p in parts]} on axis {axis}"
        )
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _trace(out, tuple(parts), bwd)


def expand(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(np.ascontiguousarray(np.broadcast_to(a.data, shape)))
    except ValueError:
        raise ContractViolation(f"expand: {a.shape} -> {shape}")
    return _trace(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).astype(a.data.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _trace(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).astype(a.data.dtype, copy=True) / count,)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy() / count,)

    return _trace(out, (a,), bwd)


def sum_sq(a: Tensor) -> Tensor:
    """Scalar sum of squares."""
    out = Tensor(np.asarray((a.data * a.data).sum(), dtype=a.data.dtype))
    return _trace(out, (a,), lambda g: (2.0 * g.reshape(()) * a.data,))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 1 or b.ndim < 2:
        raise ContractViolation(f"matmul: ranks {a.ndim} @ {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: inner dims {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        if a.ndim == 1:
            ga = np.matmul(g, bt)
            gb = np.outer(a.data, g)
        else:
            ga = _unbroadcast(np.matmul(g, bt), a.shape)
            gb = _unbroadcast(np.matmul(at, g), b.shape)
        return (ga, gb)

    return _trace(out, (a, b), bwd)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup (embedding); idx is an integer array."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractViolation(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )
    out = Tensor(np.ascontiguousarray(table.data[idx]))

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _trace(out, (table,), bwd)


# ---------------------------------------------------------------------------
# Normalization / activations over the last dim
# ---------------------------------------------------------------------------


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y.astype(x.dtype, copy=False))

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - dot)).astype(x.dtype, copy=False),)

    return _trace(out, (a,), bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat.astype(x.dtype, copy=False))
    n = x.shape[-1]

    def bwd(g):
        gmean = g.mean(axis=-1, keepdims=True)
        gdot = (g * xhat).mean(axis=-1, keepdims=True)
        return ((inv * (g - gmean - xhat * gdot)).astype(x.dtype, copy=False),)

    return _trace(out, (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    if not train or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout: p={p} outside [0, 1)")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = Tensor(a.data * keep)
    return _trace(out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Rotary position embedding
# ---------------------------------------------------------------------------


def _rotary_angles(positions: np.ndarray, dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rotary_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate feature pairs (2j, 2j+1) by pos * base^(-2j/dim).

    `x` has shape (..., seq, dim) with even dim; `positions` has length seq.
    """
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise ContractViolation(f"rotary_apply: head dim {dim} must be even")
    positions = np.asarray(positions)
    if positions.shape[0] != x.shape[-2]:
        raise ContractViolation(
            f"rotary_apply: {positions.shape[0]} positions for seq len {x.shape[-2]}"
        )
    cos, sin = _rotary_angles(positions, dim, base, x.data.dtype)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos
    out = Tensor(out_data)

    def bwd(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _trace(out, (x,), bwd)


# ---------------------------------------------------------------------------
# 2D convolution (reflect padding) and nearest upsampling
# ---------------------------------------------------------------------------


def _reflect_index(n: int, p: int) -> np.ndarray:
    """Padded-coordinate -> source-coordinate map for np.pad mode='reflect'."""
    idx = np.abs(np.arange(-p, n + p))
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def _reflect_pad_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="reflect")


def _reflect_pad_backward(gp: np.ndarray, p: int) -> np.ndarray:
    """Fold padded-region gradients back onto their mirror sources (corners too)."""
    b, hp, wp, c = gp.shape
    h, w = hp - 2 * p, wp - 2 * p
    rows = _reflect_index(h, p)
    cols = _reflect_index(w, p)
    tmp = np.zeros((h, b, wp, c), dtype=gp.dtype)
    np.add.at(tmp, rows, np.moveaxis(gp, 1, 0))
    out = np.zeros((w, h, b, c), dtype=gp.dtype)
    np.add.at(out, cols, np.moveaxis(tmp, 2, 0))
    return np.ascontiguousarray(out.transpose(2, 1, 0, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1) -> Tensor:
    """NHWC convolution with reflect padding keeping `same` coverage.

    weight: (kh, kw, c_in, c_out), kernel odd; output spatial dims are
    ceil(H/stride) x ceil(W/stride).
    """
    if x.ndim != 4:
        raise ContractViolation(f"conv2d: input must be NHWC, got {x.shape}")
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation(f"conv2d: even kernel {kh}x{kw}")
    if x.shape[3] != cin:
        raise ContractViolation(f"conv2d: {x.shape[3]} channels vs weight c_in {cin}")
    p = kh // 2
    b, h, w, _ = x.shape
    xp = _reflect_pad_nhwc(x.data, p)
    h2 = (h - 1) // stride + 1
    w2 = (w - 1) // stride + 1
    patches = np.empty((b, h2, w2, kh, kw, cin), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, :, i, j, :] = xp[:, i:i + h:stride, j:j + w:stride, :]
    pm = patches.reshape(b, h2, w2, kh * kw * cin)
    wm = weight.data.reshape(kh * kw * cin, cout)
    out_data = pm @ wm
    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data)

    def bwd(g):
        gw = np.tensordot(pm, g, axes=([0, 1, 2], [0, 1, 2])).reshape(weight.shape)
        gb = g.sum(axis=(0, 1, 2)) if bias is not None else None
        gpm = g @ wm.T
        gpatches = gpm.reshape(b, h2, w2, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + h:stride, j:j + w:stride, :] += gpatches[:, :, :, i, j, :]
        gx = _reflect_pad_backward(gxp, p)
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return _trace(out, parents, lambda g: bwd(g)[:2])
    return _trace(out, parents, bwd)


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ContractViolation(f"upsample_nearest2d: input must be NHWC, got {x.shape}")
    f = int(factor)
    out = Tensor(np.ascontiguousarray(x.data.repeat(f, axis=1).repeat(f, axis=2)))
    b, h, w, c = x.shape

    def bwd(g):
        return (g.reshape(b, h, f, w, f, c).sum(axis=(2, 4)),)

    return _trace(out, (x,), bwd)
