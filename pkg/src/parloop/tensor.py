"""Dense tensors with tape-based reverse-mode differentiation.

The op set is sized for a small transformer: batched matmul, broadcasting
elementwise arithmetic, reductions, shape ops, gather/embedding, and fused
softmax / rmsnorm / sigmoid / silu / cross-entropy kernels. Data is float64
by default (the reference precision); ``set_default_dtype`` switches to
float32 at looser tolerances. Tensors are immutable after construction
except for gradient accumulation during ``backward``.
"""

from __future__ import annotations

import contextlib
import math
import zlib

import numpy as np

from .errors import DimensionError, NumericError

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the dtype used for all subsequently created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into .grad buffers."""
        if self.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise arithmetic ---------------------------------------

    def __add__(self, other):
        return _ew(self, other, lambda a, b: a + b,
                   lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _ew(self, other, lambda a, b: a - b,
                   lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _ew(self, other, lambda a, b: b - a,
                   lambda g, a, b: -g, lambda g, a, b: g)

    def __mul__(self, other):
        return _ew(self, other, lambda a, b: a * b,
                   lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return self * (1.0 / float(other))

    def __neg__(self):
        out = Tensor(-self.data, self.requires_grad and _GRAD_ENABLED)
        if out.requires_grad:
            out._parents = (self,)
            out._backward = lambda g: self._accum(-g)
        return out

    # -- linear algebra -------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        out = Tensor(self.data.reshape(shape), self.requires_grad and _GRAD_ENABLED)
        if out.requires_grad:
            out._parents = (self,)
            out._backward = lambda g: self._accum(g.reshape(src))
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out = Tensor(self.data.swapaxes(a, b), self.requires_grad and _GRAD_ENABLED)
        if out.requires_grad:
            out._parents = (self,)
            out._backward = lambda g: self._accum(g.swapaxes(a, b))
        return out

    def transpose(self) -> "Tensor":
        """Swap the last two axes."""
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx) -> "Tensor":
        out = Tensor(self.data[idx], self.requires_grad and _GRAD_ENABLED)
        if out.requires_grad:
            src_shape = self.shape

            def bwd(g):
                buf = np.zeros(src_shape, dtype=g.dtype)
                np.add.at(buf, idx, g)
                self._accum(buf)

            out._parents = (self,)
            out._backward = bwd
        return out

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     self.requires_grad and _GRAD_ENABLED)
        if out.requires_grad:
            src_shape = self.shape

            def bwd(g):
                if axis is not None and not keepdims:
                    axes = axis if isinstance(axis, tuple) else (axis,)
                    g = np.expand_dims(g, axes)
                self._accum(np.broadcast_to(g, src_shape).copy())

            out._parents = (self,)
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


def _ew(a: Tensor, b, fwd, bwd_a, bwd_b) -> Tensor:
    """Broadcasting elementwise binary op; b may be a scalar or ndarray constant."""
    bt = b if isinstance(b, Tensor) else None
    bd = bt.data if bt is not None else np.asarray(b, dtype=a.data.dtype)
    req = _GRAD_ENABLED and (a.requires_grad or (bt is not None and bt.requires_grad))
    out = Tensor(fwd(a.data, bd), req)
    if req:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(bwd_a(g, a.data, bd), a.shape))
            if bt is not None and bt.requires_grad:
                bt._accum(_unbroadcast(bwd_b(g, a.data, bd), bt.shape))
        out._parents = (a, bt) if bt is not None else (a,)
        out._backward = bwd
    return out


def _toposort(root: Tensor) -> list:
    """Iterative post-order over the tape."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p is not None and p._backward is not None and id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# free functions
# ---------------------------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    req = _GRAD_ENABLED and (a.requires_grad or b.requires_grad)
    out = Tensor(np.matmul(a.data, b.data), req)
    if req:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))
        out._parents = (a, b)
        out._backward = bwd
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    req = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), req)
    if req:
        sizes = [t.shape[axis] for t in tensors]

        def bwd(g):
            pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
            for t, piece in zip(tensors, pieces):
                if t.requires_grad:
                    t._accum(piece)

        out._parents = tuple(tensors)
        out._backward = bwd
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = Tensor(s, x.requires_grad and _GRAD_ENABLED)
    if out.requires_grad:
        out._parents = (x,)
        out._backward = lambda g: x._accum(g * s * (1.0 - s))
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    out = Tensor(xd * s, x.requires_grad and _GRAD_ENABLED)
    if out.requires_grad:
        out._parents = (x,)
        out._backward = lambda g: x._accum(g * (s + xd * s * (1.0 - s)))
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction.

    Entries may be -inf (masked out); a row that is entirely -inf or contains
    NaN raises NumericError.
    """
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax input contains NaN")
    m = np.max(xd, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise NumericError("softmax row with no finite entry")
    e = np.exp(xd - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, x.requires_grad and _GRAD_ENABLED)
    if out.requires_grad:
        def bwd(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            x._accum(p * (g - dot))
        out._parents = (x,)
        out._backward = bwd
    return out


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps) * gain."""
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rmsnorm gain shape {gain.shape} != ({x.shape[-1]},)")
    xd = x.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    y = xd * inv * gain.data
    req = _GRAD_ENABLED and (x.requires_grad or gain.requires_grad)
    out = Tensor(y, req)
    if req:
        def bwd(g):
            if gain.requires_grad:
                gg = (g * xd * inv).reshape(-1, d).sum(axis=0)
                gain._accum(gg)
            if x.requires_grad:
                gw = g * gain.data
                dot = (gw * xd).sum(axis=-1, keepdims=True)
                x._accum(gw * inv - xd * (inv ** 3) * dot / d)
        out._parents = (x, gain)
        out._backward = bwd
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer ids (any leading shape)."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids], table.requires_grad and _GRAD_ENABLED)
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            table._accum(buf)
        out._parents = (table,)
        out._backward = bwd
    return out


def repeat_heads(x: Tensor, reps: int) -> Tensor:
    """Repeat axis -3 (the head axis of a [..., heads, seq, dim] tensor)."""
    if reps == 1:
        return x
    out = Tensor(np.repeat(x.data, reps, axis=-3), x.requires_grad and _GRAD_ENABLED)
    if out.requires_grad:
        src = x.shape
        grouped = src[:-3] + (src[-3], reps) + src[-2:]

        def bwd(g):
            x._accum(g.reshape(grouped).sum(axis=-3))

        out._parents = (x,)
        out._backward = bwd
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of `targets` under row-softmax of logits.

    logits: [..., V]; targets: integer array matching the leading shape;
    mask: optional boolean array over the leading shape selecting the rows
    that contribute to the mean.
    """
    targets = np.asarray(targets)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise DimensionError(f"targets shape {targets.shape} != {lead}")
    if mask is None:
        mask = np.ones(lead, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked out")
    ld = logits.data
    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    z = e.sum(axis=-1, keepdims=True)
    logz = np.log(z) + m
    picked = np.take_along_axis(ld, targets[..., None], axis=-1)[..., 0]
    nll = (logz[..., 0] - picked)
    loss = float((nll * mask).sum() / count)
    out = Tensor(loss, logits.requires_grad and _GRAD_ENABLED)
    if out.requires_grad:
        def bwd(g):
            onehot_sub = e / z
            np.put_along_axis(
                onehot_sub,
                targets[..., None],
                np.take_along_axis(onehot_sub, targets[..., None], axis=-1) - 1.0,
                axis=-1,
            )
            w = (mask / count)[..., None]
            logits._accum(g * onehot_sub * w)
        out._parents = (logits,)
        out._backward = bwd
    return out


def global_grad_norm(tensors) -> float:
    sq = 0.0
    for t in tensors:
        if t.grad is not None:
            sq += float((t.grad * t.grad).sum())
    return math.sqrt(sq)


# ---------------------------------------------------------------------------
# deterministic rng
# ---------------------------------------------------------------------------


class Rng:
    """Seed-derived random stream; identical seeds give identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape).astype(_DEFAULT_DTYPE)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(_DEFAULT_DTYPE)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def random(self) -> float:
        return float(self._gen.random())

    def fork(self, tag: str) -> "Rng":
        """Independent child stream, stable in `tag`."""
        return Rng((self.seed * 0x9E3779B1 + zlib.crc32(tag.encode())) % (2 ** 63))
