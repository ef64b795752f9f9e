"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 by default, float64 for
verification work). Operations executed while a Tape is active are recorded
as a Wengert list; Tape.backward sweeps the list in reverse recording order,
which is a valid reverse topological order because every operand must exist
before the operation that consumes it.

All kernels are sequential numpy calls, so forward results are deterministic
across runs on the same machine.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, ShapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Node:
    __slots__ = ("out", "fn")

    def __init__(self, out, fn):
        self.out = out
        self.fn = fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around a forward pass, then call
    ``backward(loss)``. Clearing the tape drops the record and resets
    gradients; it never touches tensor values.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out: "Tensor", fn) -> None:
        out._tape = self
        self._nodes.append(_Node(out, fn))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        Repeated calls without zeroing accumulate. Gradients of recorded
        intermediates are transient and reset at the start of each sweep.
        """
        if loss.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        if loss._tape is not self:
            raise ContractError("loss tensor is not on this tape")
        for node in self._nodes:
            node.out.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.out.grad is not None:
                node.fn(node.out.grad)

    def clear(self) -> None:
        """Drop the record and reset gradients of every tensor it touched."""
        for node in self._nodes:
            node.out.grad = None
        self._nodes.clear()


class Tensor:
    """A dense array plus optional gradient.

    ``data`` is a contiguous numpy array; ``grad`` (same shape) appears after
    a backward pass. Treat tensors as immutable once created: only gradient
    accumulation mutates state.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array. Do not mutate it."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor was not recorded on any tape")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap scalars/arrays as constant tensors, matching `like`'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, requires_grad=False, dtype=dtype)


def _result_dtype(*tensors):
    return np.result_type(*(t.dtype for t in tensors))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _make(data, inputs, fn) -> Tensor:
    """Build the output tensor and record `fn` if a tape is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._tape = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, fn)
    return out


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data + b.data

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), fn)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data - b.data

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), fn)


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data * b.data

    def fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), fn)


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data / b.data

    def fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), fn)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p

    def fn(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(data, (a,), fn)


# -- matmul ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics; 1-D operands allowed."""
    a = as_tensor(a)
    b = as_tensor(b)
    a_vec = a.ndim == 1
    b_vec = b.ndim == 1
    ad = a.data[None, :] if a_vec else a.data
    bd = b.data[:, None] if b_vec else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}"
        )
    try:
        data = np.matmul(ad, bd)
    except ValueError as e:  # mismatched batch dims
        raise ShapeError(f"matmul batch shapes differ: {a.shape} vs {b.shape}") from e
    if a_vec:
        data = data[..., 0, :]
    if b_vec:
        data = data[..., 0]

    def fn(g):
        g2 = g
        if a_vec:
            g2 = np.expand_dims(g2, -2)
        if b_vec:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g2)
        if a_vec:
            ga = ga[..., 0, :]
        else:
            ga = _unbroadcast(ga, a.shape)
        if b_vec:
            gb = gb[..., 0]
        else:
            gb = _unbroadcast(gb, b.shape)
        _accumulate(a, ga.reshape(a.shape))
        _accumulate(b, gb.reshape(b.shape))

    return _make(data, (a, b), fn)


# -- shape manipulation ---------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(a.data.reshape(shape))

    def fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), fn)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)

    def fn(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(data, (a,), fn)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(a.data[key])
    advanced = isinstance(key, (np.ndarray, list)) or (
        isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key)
    )

    def fn(g):
        if not a.requires_grad:
            return
        gx = np.zeros_like(a.data)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] += g
        _accumulate(a, gx)

    return _make(data, (a,), fn)


def scatter_rows(base, idx, rows) -> Tensor:
    """Copy of `base` with rows `idx` replaced by `rows` (gradient splits)."""
    base = as_tensor(base)
    rows = as_tensor(rows, like=base)
    idx = np.asarray(idx)
    data = base.data.copy()
    data[idx] = rows.data

    def fn(g):
        gb = g.copy()
        gb[idx] = 0.0
        _accumulate(base, gb)
        _accumulate(rows, g[idx])

    return _make(data, (base, rows), fn)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def fn(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _make(data, tuple(tensors), fn)


# -- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), fn)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _make(data, (a,), fn)


def cumsum(a, axis=0, exclusive=False) -> Tensor:
    """Running sum along `axis`; exclusive variant starts at zero."""
    a = as_tensor(a)
    inc = np.cumsum(a.data, axis=axis)
    if exclusive:
        data = np.zeros_like(a.data)
        head = [slice(None)] * a.ndim
        tail = [slice(None)] * a.ndim
        head[axis] = slice(1, None)
        tail[axis] = slice(None, -1)
        data[tuple(head)] = inc[tuple(tail)]
    else:
        data = inc

    def fn(g):
        rev = [slice(None)] * a.ndim
        rev[axis] = slice(None, None, -1)
        rev = tuple(rev)
        gx = np.cumsum(g[rev], axis=axis)[rev]
        if exclusive:
            gx = gx - g
        _accumulate(a, gx)

    return _make(data, (a,), fn)


# -- elementwise nonlinearities --------------------------------------------

def texp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def fn(g):
        _accumulate(a, g * data)

    return _make(data, (a,), fn)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def fn(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), fn)


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def fn(g):
        _accumulate(a, g / (2.0 * data))

    return _make(data, (a,), fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def fn(g):
        _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = expit(a.data)

    def fn(g):
        _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), fn)


def gelu(a) -> Tensor:
    """Exact GELU x * Phi(x) using the erf form."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accumulate(a, g * (cdf + x * pdf))

    return _make(data, (a,), fn)


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes where lo <= x <= hi."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def fn(g):
        mask = np.ones_like(a.data)
        if lo is not None:
            mask *= a.data >= lo
        if hi is not None:
            mask *= a.data <= hi
        _accumulate(a, g * mask)

    return _make(data, (a,), fn)


def smooth_min(a, limit: float, sharpness: float = 100.0) -> Tensor:
    """Differentiable min(x, limit): -log(exp(-kx) + exp(-kL)) / k.

    Evaluated in the shifted form min(x, L) - log1p(exp(-k|x-L|)) / k for
    stability; the output is strictly below min(x, limit).
    """
    a = as_tensor(a)
    k = float(sharpness)
    lim = float(limit)
    x = a.data
    data = np.minimum(x, lim) - np.log1p(np.exp(-k * np.abs(x - lim))) / k
    data = data.astype(x.dtype)

    def fn(g):
        _accumulate(a, g * expit(k * (lim - x)))

    return _make(data, (a,), fn)


def softmax(a, axis=-1) -> Tensor:
    """Shift-invariant softmax along `axis`; rows sum to one."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - dot))

    return _make(data, (a,), fn)


def unit_vectors(a, eps: float = 1e-8, fallback_index: int = 0) -> Tensor:
    """Normalize along the last axis.

    Rows with norm < eps map to the one-hot basis vector at fallback_index
    and receive zero gradient (the degenerate guard is measure-zero).
    """
    a = as_tensor(a)
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    degenerate = norms < eps
    safe = np.where(degenerate, 1.0, norms)
    data = a.data / safe
    if degenerate.any():
        onehot = np.zeros(a.shape[-1], dtype=a.dtype)
        onehot[fallback_index] = 1.0
        data = np.where(degenerate, onehot, data)

    def fn(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        gx = (g - data * dot) / safe
        gx = np.where(degenerate, 0.0, gx)
        _accumulate(a, gx)

    return _make(data, (a,), fn)


# -- normalization layers ----------------------------------------------------

def layer_norm(x, scale, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last dimension, learned scale only (no bias)."""
    x = as_tensor(x)
    scale = as_tensor(scale, like=x)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm needs a non-empty last dimension")
    if scale.shape != (d,):
        raise ShapeError(
            f"layer_norm scale shape {scale.shape} does not match feature dim {d}"
        )
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return mul(mul(centered, inv), scale)


def rms_norm(x, scale, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * scale, over the last dimension."""
    x = as_tensor(x)
    scale = as_tensor(scale, like=x)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("rms_norm needs a non-empty last dimension")
    if scale.shape != (d,):
        raise ShapeError(
            f"rms_norm scale shape {scale.shape} does not match feature dim {d}"
        )
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = power(add(ms, eps), -0.5)
    return mul(mul(x, inv), scale)


def backward(loss: Tensor) -> None:
    """Run the backward sweep of the tape `loss` was recorded on."""
    loss.backward()
