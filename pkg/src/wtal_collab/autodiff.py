"""Define-by-run reverse-mode automatic differentiation over float64 numpy arrays.

Every operation builds a fresh node that remembers its parents and a backward
closure. ``Tensor.backward`` orders the recorded graph topologically (the
tape), then replays it once in reverse, accumulating gradients into leaves.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tensor:
    """A dense float64 array that can take part in a differentiable graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ParameterError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
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
                grads[key] = grads[key] + pg if key in grads else pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def topological_order(root):
    """Nodes reachable from ``root`` through differentiable edges, inputs first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# ----------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _node(data, (a, b), backward, "div")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)
    return _node(out, (a,), backward, "gelu")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient flows only where the input was inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------------
# shape and linear algebra

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _node(data, (a, b), backward, "matmul")


def transpose(a, axes=None):
    """Permute axes; by default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError("transpose needs at least 2 dims")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _node(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _node(data, tuple(tensors), backward, "concat")


def getitem(a, index):
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _node(np.array(data), (a,), backward, "getitem")


def embedding_lookup(table, ids):
    """Rows of ``table`` selected by integer ``ids``; repeated ids accumulate."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ParameterError("embedding id out of range")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)
    return _node(table.data[ids], (table,), backward, "embedding")


# ----------------------------------------------------------------------------
# reductions and normalizations

def softmax(a, axis=-1):
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _node(out, (a,), backward, "softmax")


def masked_logsumexp(a, mask, axis=-1):
    """log Σ exp(a) over entries where ``mask`` is true; masked entries get zero gradient.

    Slices with no selected entry yield -inf.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} != input shape {a.shape}")
    x = np.where(mask, a.data, -np.inf)
    mx = x.max(axis=axis, keepdims=True)
    safe_mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(x - safe_mx), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + safe_mx
        weights = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)

    def backward(g):
        return (weights * np.expand_dims(g, axis),)
    return _node(np.squeeze(out, axis=axis), (a,), backward, "masked_logsumexp")


def topk_mean(a, k, axis=0):
    """Mean of the ``k`` largest entries along ``axis``; ties go to the lowest index."""
    n = a.shape[axis]
    if not 1 <= k <= n:
        raise ParameterError(f"top-k size {k} outside [1, {n}]")
    order = np.argsort(-a.data, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    vals = np.take_along_axis(a.data, idx, axis=axis)
    out = vals.mean(axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        spread = np.broadcast_to(np.expand_dims(g, axis) / k, idx.shape)
        np.put_along_axis(full, idx, spread, axis=axis)
        return (full,)
    return _node(out, (a,), backward, "topk_mean")


def layer_norm(a, gamma=None, beta=None, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then apply the affine map."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    n = x.shape[-1]

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)
    parents = [a] + [t for t in (gamma, beta) if t is not None]
    return _node(out, tuple(parents), backward, "layer_norm")


def l2_normalize(a, axis=-1, eps=1e-12):
    """Scale slices along ``axis`` to unit Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps)
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)
    return _node(out, (a,), backward, "l2_normalize")


def scaled_dot_attention(q, k, v, heads, window=None):
    """Non-causal multi-head attention over the frame axis.

    ``q``, ``k``, ``v`` are T×d; the model width is split evenly over ``heads``.
    With ``window`` set, frame i only attends to frames j with |i - j| <= window.
    """
    if not (q.shape == k.shape and k.shape[0] == v.shape[0] and q.ndim == 2 and v.ndim == 2):
        raise DimensionError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    t, d = q.shape
    dv = v.shape[1]
    if d % heads or dv % heads:
        raise DimensionError(f"width {d}/{dv} not divisible by {heads} heads")

    def split(x, width):
        return transpose(reshape(x, (t, heads, width // heads)), (1, 0, 2))

    qh, kh, vh = split(q, d), split(k, d), split(v, dv)
    scores = matmul(qh, transpose(kh)) * (1.0 / math.sqrt(d // heads))
    if window is not None:
        idx = np.arange(t)
        band = np.abs(idx[:, None] - idx[None, :]) <= window
        scores = scores + np.where(band, 0.0, -1e9)
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)
    return reshape(transpose(ctx, (1, 0, 2)), (t, dv))


# ----------------------------------------------------------------------------
# finite-difference checking

def numerical_gradient(fn, tensor, h=1e-5):
    """Central differences of the scalar ``fn()`` with respect to ``tensor.data``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = fn().data.sum()
            flat[i] = orig - h
            minus = fn().data.sum()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * h)
    return grad


def gradient_check(fn, tensors, h=1e-5, floor=1e-4):
    """Largest relative error between analytic and numerical gradients.

    ``fn`` must rebuild its graph from ``tensors`` on every call and return a
    scalar tensor. Gradient norms below ``floor`` are compared absolutely, so
    an identically-zero gradient does not divide noise by noise.
    """
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(fn, t, h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
