"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap NumPy arrays. When a :class:`Tape` is active, every primitive
operation involving a gradient-requiring tensor is recorded in execution
order; ``Tape.grad`` replays the records backwards exactly once per node.
Without an active tape the same functions run as plain NumPy compute, so
inference shares one code path with training.

Float32 is the working precision; gradient-check oracles switch to float64
through :func:`precision`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special

_FLOAT_DTYPES = (np.float32, np.float64)

_default_dtype = np.dtype(np.float32)

_TAPE_STACK: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for freshly created tensors."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt.type not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported precision {dtype!r}")
    old = _default_dtype
    _default_dtype = dt
    try:
        yield
    finally:
        _default_dtype = old


class Tensor:
    """Dense array with optional gradient tracking.

    ``data`` is always a NumPy float array; ``requires_grad`` marks leaf
    parameters whose gradients :class:`Tape` should produce.
    """

    __slots__ = ("data", "requires_grad")
    __array_ufunc__ = None  # force NumPy to defer to the reflected dunders

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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

    def __getitem__(self, key):
        return getitem(self, key)

    # shape helpers ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, inputs, backward):
        self._nodes.append(_Node(out, inputs, backward))

    def grad(self, loss: Tensor, params: Sequence[Tensor]) -> dict:
        """Reverse sweep from ``loss``; returns {param: gradient Tensor}.

        The tape is consumed: a second call raises.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed; record a fresh tape per step")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
        params = list(params)

        reachable = {id(loss)}
        for node in reversed(self._nodes):
            if id(node.out) in reachable:
                for inp in node.inputs:
                    reachable.add(id(inp))
        for p in params:
            if id(p) not in reachable:
                raise ValueError("parameter is not reachable from the loss on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            for inp, g_in in node.backward(g_out):
                if not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                if acc is None:
                    # stored grads are accumulated in place later, so they must
                    # own writable memory and never alias another node's grad
                    if g_in is g_out or not g_in.flags.owndata or not g_in.flags.writeable:
                        g_in = np.array(g_in)
                    grads[id(inp)] = g_in
                else:
                    acc += g_in

        self._nodes.clear()
        self._consumed = True

        out = {}
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            out[p] = Tensor(g, dtype=p.data.dtype)
        return out


def grad(loss: Tensor, params: Sequence[Tensor]) -> dict:
    """Gradient of a scalar loss w.r.t. params, using the innermost active tape."""
    if not _TAPE_STACK:
        raise RuntimeError("no active tape; wrap the forward pass in `with Tape() as tape`")
    return _TAPE_STACK[-1].grad(loss, params)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _lift(x, ref: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = ref.data.dtype if ref is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes introduced or stretched by broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(out_data, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        tape._record(out, inputs, backward)
    return out


def _unary(x, fwd: Callable, vjp: Callable) -> Tensor:
    x = _lift(x)
    out_data = fwd(x.data)

    def backward(g):
        return ((x, vjp(g, x.data, out_data)),)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out_data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out_data = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _make(out_data, (a, b), backward)


def neg(a):
    return _unary(a, lambda x: -x, lambda g, x, y: -g)


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out_data = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(out_data, (a, b), backward)


def div(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out_data = a.data / b.data

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        )

    return _make(out_data, (a, b), backward)


def power(a, p):
    if isinstance(p, Tensor):
        raise TypeError("power supports constant exponents only")
    p = float(p)
    return _unary(a, lambda x: x**p, lambda g, x, y: g * p * x ** (p - 1.0))


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    return _unary(a, np.log, lambda g, x, y: g / x)


def log1p(a):
    if not isinstance(a, Tensor):
        return np.log1p(a)
    return _unary(a, np.log1p, lambda g, x, y: g / (1.0 + x))


def sqrt(a):
    if not isinstance(a, Tensor):
        return np.sqrt(a)
    return _unary(a, np.sqrt, lambda g, x, y: g * 0.5 / y)


def tanh(a):
    if not isinstance(a, Tensor):
        return np.tanh(a)
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _special.expit(a)
    return _unary(a, _special.expit, lambda g, x, y: g * y * (1.0 - y))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    if not isinstance(a, Tensor):
        return _softplus(np.asarray(a))
    return _unary(a, _softplus, lambda g, x, y: g * _special.expit(x))


def lgamma(a):
    if not isinstance(a, Tensor):
        return _special.gammaln(a)
    return _unary(
        a,
        lambda x: _special.gammaln(x).astype(x.dtype),
        lambda g, x, y: g * _special.psi(x).astype(x.dtype),
    )


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            gi = np.broadcast_to(g, a.data.shape)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            gi = np.broadcast_to(g_exp, a.data.shape)
        return ((a, gi),)

    return _make(np.asarray(out_data), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // out_data.size

    def backward(g):
        if axis is None:
            gi = np.broadcast_to(g / count, a.data.shape)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            gi = np.broadcast_to(g_exp / count, a.data.shape)
        return ((a, gi),)

    return _make(np.asarray(out_data), (a,), backward)


def reshape(a, shape):
    a = _lift(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        return ((a, g.reshape(a.data.shape)),)

    return _make(out_data, (a,), backward)


def concat(tensors: Iterable, axis: int = 0):
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append((t, g[tuple(idx)]))
        return tuple(grads)

    return _make(out_data, tuple(tensors), backward)


def getitem(a, key):
    a = _lift(a)
    out_data = a.data[key]

    def backward(g):
        gi = np.zeros_like(a.data)
        gi[key] += g
        return ((a, gi),)

    return _make(out_data, (a,), backward)


def matmul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out_data = a.data @ b.data

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# 2-D convolution (cross-correlation semantics)
# ---------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """Cross-correlate ``x`` ([C,H,W] or [N,C,H,W]) with kernels ``w`` [F,C,kh,kw].

    Computed as one GEMM per kernel offset over strided views, which beats an
    im2col gather at these sizes.
    """
    x = _lift(x, w if isinstance(w, Tensor) else None)
    w = _lift(w, x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects [C,H,W] or [N,C,H,W] input and [F,C,kh,kw] kernels")
    n, c, h, wd_ = xd.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ValueError(f"kernel channels {cw} do not match input channels {c}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd_ + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("kernel does not fit the padded input")

    xp = _pad_hw(xd, padding)

    def offset_view(arr, i, j):
        return arr[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]

    acc = np.zeros((f, n, oh, ow), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(w.data[:, :, i, j], offset_view(xp, i, j), axes=([1], [1]))
    out_data = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    if b is not None:
        b = _lift(b, x)
        out_data += b.data[None, :, None, None]
    if squeeze:
        out_data = out_data[0]

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gb = g[None] if squeeze else g  # [N,F,OH,OW]
        grads = []
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    t = np.tensordot(w.data[:, :, i, j], gb, axes=([0], [1]))  # [C,N,OH,OW]
                    offset_view(dxp, i, j)[...] += t.transpose(1, 0, 2, 3)
            dx = dxp[:, :, padding : padding + h, padding : padding + wd_] if padding else dxp
            grads.append((x, dx[0] if squeeze else dx))
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    dw[:, :, i, j] = np.tensordot(gb, offset_view(xp, i, j), axes=([0, 2, 3], [0, 2, 3]))
            grads.append((w, dw))
        if b is not None and b.requires_grad:
            grads.append((b, gb.sum(axis=(0, 2, 3))))
        return tuple(grads)

    return _make(out_data, inputs, backward)
