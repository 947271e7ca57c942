"""Reverse-mode automatic differentiation over dense numpy arrays.

A global tape records every operation whose inputs require gradients, in
creation order (which is a topological order by construction).  ``backward``
replays the tape in reverse from the loss entry, accumulating gradients into
``Tensor.grad``.  Leaf gradients accumulate across repeated backward calls;
intermediate gradients are reset at the start of each call.

The tape is confined to one training step on one coordinator thread.  Tensor
values are treated as immutable after creation.
"""

from __future__ import annotations

import contextlib
import numpy as np

__all__ = [
    "Tensor", "ShapeError", "no_grad", "grad_enabled", "clear_tape",
    "tape_size", "backward", "add", "sub", "mul", "div", "relu", "tanh",
    "sigmoid", "exp", "softplus", "log", "sqrt", "absolute", "sin", "cos",
    "power",
    "maximum", "minimum", "clip", "matmul", "conv2d", "upsample_nearest2",
    "avgpool2", "softmax", "reduce_sum", "reduce_mean", "reshape",
    "transpose", "concat", "stack", "gather", "scatter_rows",
    "sparse_matmul", "as_tensor", "zeros", "ones", "full",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True
_tape: list["_Entry"] = []


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def clear_tape():
    """Drop all recorded operations (call once per training step)."""
    _tape.clear()


def tape_size() -> int:
    return len(_tape)


class _Entry:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tensor:
    """Dense float array participating in the gradient tape.

    ``data`` is float32 by default; float64 inputs are kept as float64 so
    tests can run shadow evaluations at higher precision.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic operators
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
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def _coerce_pair(a, b):
    """Coerce operands to Tensors, matching the dtype of the array operand."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return Tensor(a), Tensor(b)


def _record(out: Tensor, parents, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = len(_tape)
        _tape.append(_Entry(out, list(parents), backward))
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor on the tape.

    Repeated calls without clearing leaf gradients accumulate; intermediate
    node gradients are reset on each call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    entries = _tape[: loss.node_id + 1]
    for e in entries:
        e.out.grad = None
    loss.grad = np.ones_like(loss.data)
    for e in reversed(entries):
        g = e.out.grad
        if g is None:
            continue
        for p, gp in zip(e.parents, e.backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.data.shape:
                gp = gp.reshape(p.data.shape)
            p.grad = gp if p.grad is None else p.grad + gp


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient over broadcast axes back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b):
    a, b = _coerce_pair(a, b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from err
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(bwd_a(g, a.data, b.data), a.shape) if need_a else None
        gb = _unbroadcast(bwd_b(g, a.data, b.data), b.shape) if need_b else None
        return (ga, gb)

    return _record(Tensor(out_data), (a, b), bw)


def _scalar_op(a, s: float, fwd, bwd):
    """Binary op with a python-number operand (kept off the tape)."""
    a = as_tensor(a)
    out = Tensor(fwd(a.data, s))

    def bw(g):
        return (bwd(g, a.data, s),)

    return _record(out, (a,), bw)


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scalar_op(a, b, np.add, lambda g, x, s: g)
    if isinstance(a, (int, float)):
        return _scalar_op(b, a, lambda x, s: x + s, lambda g, x, s: g)
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scalar_op(a, b, np.subtract, lambda g, x, s: g)
    if isinstance(a, (int, float)):
        return _scalar_op(b, a, lambda x, s: s - x, lambda g, x, s: -g)
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scalar_op(a, b, np.multiply, lambda g, x, s: g * s)
    if isinstance(a, (int, float)):
        return _scalar_op(b, a, lambda x, s: x * s, lambda g, x, s: g * s)
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scalar_op(a, b, np.divide, lambda g, x, s: g / s)
    if isinstance(a, (int, float)):
        return _scalar_op(b, a, lambda x, s: s / x, lambda g, x, s: -g * s / (x * x))
    return _binary(a, b, np.divide, lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


def maximum(a, b) -> Tensor:
    def bwd_a(g, x, y):
        return g * (x >= y)

    def bwd_b(g, x, y):
        return g * (x < y)

    return _binary(a, b, np.maximum, bwd_a, bwd_b)


def minimum(a, b) -> Tensor:
    def bwd_a(g, x, y):
        return g * (x <= y)

    def bwd_b(g, x, y):
        return g * (x > y)

    return _binary(a, b, np.minimum, bwd_a, bwd_b)


def _unary(a, fwd_data, bwd):
    a = as_tensor(a)
    out = Tensor(fwd_data(a.data))

    def bw(g):
        return (bwd(g, a.data, out.data),)

    return _record(out, (a,), bw)


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0), lambda g, x, y: g * (x > 0))


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def _sigmoid_data(x):
    # overflow in exp(-x) saturates cleanly to 0, so just silence the warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid_data, lambda g, x, y: g * y * (1.0 - y))


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    def fwd(x):
        return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)

    def bwd(g, x, y):
        return g * _sigmoid_data(x)

    return _unary(a, fwd, bwd)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda g, x, y: g / x)


def sqrt(a) -> Tensor:
    # backward guarded at 0 so exact-zero residuals do not poison training
    def bwd(g, x, y):
        return g / (2.0 * np.maximum(y, np.asarray(1e-12, dtype=y.dtype)))

    return _unary(a, np.sqrt, bwd)


def absolute(a) -> Tensor:
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x))


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda g, x, y: g * np.cos(x))


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda g, x, y: -g * np.sin(x))


def power(a, p: float) -> Tensor:
    p = float(p)
    return _unary(a, lambda x: x ** p, lambda g, x, y: g * p * x ** (p - 1.0))


def clip(a, lo: float, hi: float) -> Tensor:
    def bwd(g, x, y):
        return g * ((x >= lo) & (x <= hi))

    return _unary(a, lambda x: np.clip(x, lo, hi), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record(out, (a, b), bw)


def conv2d(x, kernels) -> Tensor:
    """3x3 stride-1 same-padding convolution: (c_in,h,w) * (c_out,c_in,3,3)."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects (c,h,w) input and (o,c,3,3) kernels, "
                         f"got {x.shape} and {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {c_in} vs kernels {kc}")
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernels must be 3x3, got {kh}x{kw}")

    pad = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * 9, h * w)
    kmat = kernels.data.reshape(c_out, c_in * 9)
    out = Tensor((kmat @ cols).reshape(c_out, h, w))

    def bw(g):
        gmat = g.reshape(c_out, h * w)
        dk = (gmat @ cols.T).reshape(c_out, c_in, 3, 3)
        dcols = (kmat.T @ gmat).reshape(c_in, 3, 3, h, w)
        dpad = np.zeros((c_in, h + 2, w + 2), dtype=g.dtype)
        for di in range(3):
            for dj in range(3):
                dpad[:, di:di + h, dj:dj + w] += dcols[:, di, dj]
        return (dpad[:, 1:-1, 1:-1], dk)

    return _record(out, (x, kernels), bw)


def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbour 2x upsample of a (c,h,w) tensor."""
    x = as_tensor(x)
    c, h, w = x.shape
    out = Tensor(x.data.repeat(2, axis=1).repeat(2, axis=2))

    def bw(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _record(out, (x,), bw)


def avgpool2(x) -> Tensor:
    """2x2 stride-2 average pooling of a (c,h,w) tensor with even h, w."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 requires even spatial dims, got {x.shape}")
    out = Tensor(x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)))

    def bw(g):
        gx = np.empty((c, h, w), dtype=g.dtype)
        gq = g * 0.25
        gx.reshape(c, h // 2, 2, w // 2, 2)[:] = gq[:, :, None, :, None]
        return (gx,)

    return _record(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis`` (rows sum to 1)."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bw)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(g.dtype, copy=False),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), bw)


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return reduce_sum(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        return (g.reshape(old),)

    return _record(out, (x,), bw)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.transpose(axes) if axes is not None else x.data.T)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv) if inv is not None else g.T,)

    return _record(out, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bw(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis=axis) for p in parts)

    return _record(out, tensors, bw)


def _scatter_add_rows(idx, g, n_rows: int, row_shape, dtype):
    """Sum rows of g into an (n_rows, *row_shape) array at idx (duplicates add).

    Uses flat bincount, which is much faster than np.add.at on one core.
    """
    trailing = int(np.prod(row_shape)) if row_shape else 1
    flat_idx = idx.reshape(-1)
    if trailing == 1:
        acc = np.bincount(flat_idx, weights=g.reshape(-1), minlength=n_rows)
        return acc.astype(dtype, copy=False).reshape((n_rows,) + tuple(row_shape))
    offs = flat_idx[:, None] * trailing + np.arange(trailing, dtype=flat_idx.dtype)
    acc = np.bincount(offs.reshape(-1), weights=g.reshape(-1),
                      minlength=n_rows * trailing)
    return acc.astype(dtype, copy=False).reshape((n_rows,) + tuple(row_shape))


def gather(x, idx) -> Tensor:
    """Index axis 0 with an integer array; output shape = idx.shape + x.shape[1:]."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    out = Tensor(x.data[idx])

    def bw(g):
        return (_scatter_add_rows(idx, g, x.shape[0], x.shape[1:], x.dtype),)

    return _record(out, (x,), bw)


def scatter_rows(idx, src, n_rows: int) -> Tensor:
    """Build a (n_rows, ...) tensor with src rows added at idx (duplicates sum)."""
    src = as_tensor(src)
    idx = np.asarray(idx)
    data = _scatter_add_rows(idx, src.data, n_rows, src.shape[1:], src.dtype)
    out = Tensor(data)

    def bw(g):
        return (g[idx],)

    return _record(out, (src,), bw)


def sparse_matmul(sp, x) -> Tensor:
    """Multiply a constant scipy sparse matrix by a dense (n, d) tensor."""
    x = as_tensor(x)
    out = Tensor(np.asarray(sp @ x.data))

    def bw(g):
        return (np.asarray(sp.T @ g),)

    return _record(out, (x,), bw)


def _getitem(x, key) -> Tensor:
    x = as_tensor(x)
    if isinstance(key, (np.ndarray, list)):
        return gather(x, np.asarray(key))
    out = Tensor(x.data[key])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _record(out, (x,), bw)
