"""Dense tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: every differentiable operation records a
closure that maps the output gradient to gradients of its parents, and
:meth:`Tensor.backward` replays the tape in reverse topological order.

Precision is a process-wide setting (:func:`set_precision`).  Gradient checks
only make sense in 64-bit mode, which is also the default.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "tensor",
    "parameter",
    "set_precision",
    "get_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "swish",
    "exp",
    "log",
    "absolute",
    "log_softmax",
    "softmax",
    "layer_norm",
    "concat",
    "stack",
    "take",
    "transpose",
    "scale",
    "depthwise_conv1d",
    "glu",
    "check_gradients",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()
_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float64


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floating point for newly created tensors."""
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch precision."""
    old = 64 if _dtype is np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """An array plus an optional gradient slot and a link into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        """Create an op result; records the tape entry only when needed."""
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            return Tensor(data, True, _parents=parents, _backward=backward)
        return Tensor(data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        # iterative DFS; each node is visited once
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __getitem__(self, index):
        data = self.data[index]
        shape = self.shape

        def backward(g):
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._make(data, (self,), backward)

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return scale(self.sum(axis=axis, keepdims=keepdims), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)
        return Tensor._make(data, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else None


def _check_broadcast(a_shape, b_shape):
    """Equal shapes, or a vector broadcast over the rows of the other operand."""
    if a_shape == b_shape:
        return 0
    if len(b_shape) == 1 and len(a_shape) >= 1 and a_shape[-1] == b_shape[0]:
        return 1
    if len(a_shape) == 1 and len(b_shape) >= 1 and b_shape[-1] == a_shape[0]:
        return 2
    raise DimensionError(f"incompatible shapes {a_shape} and {b_shape}")


def _reduce_rows(g, n):
    return g.reshape(-1, n).sum(axis=0)


def _check_const(const_shape, tensor_shape):
    if const_shape and np.broadcast_shapes(const_shape, tensor_shape) != tensor_shape:
        raise DimensionError(f"constant of shape {const_shape} would broadcast {tensor_shape}")


def add(a, b) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta is None or tb is None:
        t, c = (ta, b) if ta is not None else (tb, a)
        c = np.asarray(c)
        _check_const(c.shape, t.shape)
        return Tensor._make(t.data + c, (t,), lambda g: (g,))
    kind = _check_broadcast(ta.shape, tb.shape)

    def backward(g):
        ga = g if kind != 2 else _reduce_rows(g, ta.shape[0])
        gb = g if kind != 1 else _reduce_rows(g, tb.shape[0])
        return ga, gb

    return Tensor._make(ta.data + tb.data, (ta, tb), backward)


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, scale(b, -1.0))
    return add(a, -np.asarray(b))


def mul(a, b) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta is None or tb is None:
        t, c = (ta, b) if ta is not None else (tb, a)
        c = np.asarray(c, dtype=t.data.dtype)
        _check_const(c.shape, t.shape)
        return Tensor._make(t.data * c, (t,), lambda g: (g * c,))
    kind = _check_broadcast(ta.shape, tb.shape)
    ad, bd = ta.data, tb.data

    def backward(g):
        ga = g * bd
        gb = g * ad
        if kind == 2:
            ga = _reduce_rows(ga, ad.shape[0])
        if kind == 1:
            gb = _reduce_rows(gb, bd.shape[0])
        return ga, gb

    return Tensor._make(ad * bd, (ta, tb), backward)


def scale(x: Tensor, s: float) -> Tensor:
    return Tensor._make(x.data * s, (x,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _unary(x, fwd, dfn):
    y = fwd(x.data)
    return Tensor._make(y, (x,), lambda g: (g * dfn(x.data, y),))


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    return _unary(x, _sigmoid, lambda v, y: y * (1.0 - y))


def tanh(x: Tensor) -> Tensor:
    return _unary(x, np.tanh, lambda v, y: 1.0 - y * y)


def relu(x: Tensor) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0), lambda v, y: (v > 0).astype(v.dtype))


def swish(x: Tensor) -> Tensor:
    def d(v, y):
        s = _sigmoid(v)
        return s * (1.0 + v * (1.0 - s))

    return _unary(x, lambda v: v * _sigmoid(v), d)


def exp(x: Tensor) -> Tensor:
    return _unary(x, np.exp, lambda v, y: y)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log, lambda v, y: 1.0 / v)


def absolute(x: Tensor) -> Tensor:
    return _unary(x, np.abs, lambda v, y: np.sign(v))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, stabilised by max subtraction."""
    v = x.data
    shifted = v - v.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(y, (x,), backward)


def softmax(x: Tensor, bias=None) -> Tensor:
    """Softmax over the last axis; ``bias`` is an additive constant (masking)."""
    v = x.data if bias is None else x.data + bias
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = v.shape[-1]

    def backward(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_rows(g * xhat, n), _reduce_rows(g, n)

    return Tensor._make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(data, tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(data, tuple(tensors), backward)


def take(x: Tensor, indices, axis=0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward."""
    indices = np.asarray(indices)
    data = np.take(x.data, indices, axis=axis)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (out,)

    return Tensor._make(data, (x,), backward)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis (first half * sigmoid(second half))."""
    v = x.data
    h = v.shape[-1] // 2
    a, b = v[..., :h], v[..., h:]
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return Tensor._make(a * s, (x,), backward)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel convolution over time with symmetric zero padding.

    ``x`` is (..., L, C), ``weight`` is (K, C) with K odd, ``bias`` is (C,).
    """
    k = weight.shape[0]
    if k % 2 != 1:
        raise DimensionError("kernel size must be odd")
    if weight.shape[1] != x.shape[-1]:
        raise DimensionError(f"channel mismatch {weight.shape} vs {x.shape}")
    half = k // 2
    L = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    w = weight.data
    out = np.zeros_like(x.data) + bias.data
    for j in range(k):
        out += xp[..., j:j + L, :] * w[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for j in range(k):
            gxp[..., j:j + L, :] += g * w[j]
            gw[j] = _reduce_rows(g * xp[..., j:j + L, :], w.shape[1])
        return gxp[..., half:half + L, :], gw, _reduce_rows(g, w.shape[1])

    return Tensor._make(out, (x, weight, bias), backward)


def check_gradients(f, params, eps=1e-5, max_entries=None, rng=None, floor=1e-6):
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Returns the largest relative error over ``params``, where each parameter's
    error is ``|g_a - g_n| / max(|g_a|, |g_n|, floor)`` measured as vector
    norms over the checked entries; ``floor`` keeps parameters whose gradient
    is identically zero (e.g. attention key biases) from reporting
    finite-difference noise as relative error.  With ``max_entries`` only a
    random subset of each parameter's entries is perturbed.
    """
    if get_dtype() != np.float64:
        raise RuntimeError("gradient checks require 64-bit precision")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                num[n] = (hi - lo) / (2 * eps)
        ana = analytic.reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), floor)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst
