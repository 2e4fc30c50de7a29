"""Minimal dense-tensor reverse-mode autodiff on numpy float32 arrays.

Each Tensor records its parents and a backward closure; backward() walks the
graph in reverse topological order and accumulates gradients additively.
Only what the embedder/extractor networks need is implemented.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch

# float32 by default; tests may switch to float64 for tight finite-difference
# oracles via set_default_dtype.
_DTYPE = np.float32


def set_default_dtype(dtype):
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # ---- graph execution ----

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=_DTYPE)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=_DTYPE)
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ---- operators ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, _parents=(a, b))
    out._backward = lambda g: (
        _unbroadcast(g, a.data.shape),
        _unbroadcast(g, b.data.shape),
    )
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, _parents=(a, b))
    out._backward = lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    )
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**exponent, _parents=(a,))
    out._backward = lambda g: (g * exponent * a.data ** (exponent - 1.0),)
    return out


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    out._backward = backward
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data), _parents=(a,))
    out._backward = lambda g: (g * out.data,)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), _parents=(a,))
    out._backward = lambda g: (g / a.data,)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,))
    out._backward = lambda g: (g * (a.data > 0),)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, _parents=(a,))
    out._backward = lambda g: (g * out.data * (1.0 - out.data),)
    return out


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, _parents=(a,))

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    out._backward = backward
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi), _parents=(a,))
    inside = (a.data >= lo) & (a.data <= hi)
    out._backward = lambda g: (g * inside,)
    return out


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a_ % a.data.ndim for a_ in axes):
                g2 = np.expand_dims(g2, ax)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    out._backward = backward
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), _parents=(a,))
    out._backward = lambda g: (g.reshape(a.data.shape),)
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes), _parents=(a,))
    inverse = np.argsort(axes)
    out._backward = lambda g: (g.transpose(inverse),)
    return out


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key], _parents=(a,))

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    out._backward = backward
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    out._backward = lambda g: tuple(np.moveaxis(g, axis, 0))
    return out


# ---- convolution ----


def _im2col_shape(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 1) -> Tensor:
    """2D convolution, NCHW layout, square kernel.

    Computed as k*k shifted matrix products on a channels-last copy, which
    keeps all the heavy lifting in BLAS without materializing patch matrices.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    b, c, h, w = x.data.shape
    c_out, c_in, k, _ = weight.data.shape
    if c_in != c:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight expects {c_in}")
    ho, wo = _im2col_shape(h, w, k, stride, pad)
    xt = np.ascontiguousarray(
        np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    )  # (B, Hp, Wp, C)
    acc = np.zeros((b * ho * wo, c_out), dtype=x.data.dtype)
    # contiguous per-tap weights so every product hits the fast BLAS path
    wtaps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))  # (k, k, Cout, C)
    for di in range(k):
        for dj in range(k):
            patch = xt[:, di : di + ho * stride : stride,
                       dj : dj + wo * stride : stride, :].reshape(-1, c)
            acc += patch @ wtaps[di, dj].T
    out_data = acc.reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(np.ascontiguousarray(out_data), _parents=parents)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        gw = np.empty_like(weight.data)
        gxt = np.zeros_like(xt)
        for di in range(k):
            for dj in range(k):
                patch = xt[:, di : di + ho * stride : stride,
                           dj : dj + wo * stride : stride, :].reshape(-1, c)
                gw[:, :, di, dj] = gmat.T @ patch
                gxt[:, di : di + ho * stride : stride,
                    dj : dj + wo * stride : stride, :] += (
                    gmat @ wtaps[di, dj]
                ).reshape(b, ho, wo, c)
        gx = np.ascontiguousarray(
            gxt[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2)
        )
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    out._backward = backward
    return out


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    out = Tensor(out_data, _parents=(x,))
    b, c, h, w = x.data.shape

    def backward(g):
        g = g.reshape(b, c, h, factor, w, factor)
        return (g.sum(axis=(3, 5)),)

    out._backward = backward
    return out


def instance_stats(x, eps: float = 1e-5):
    """Per-(batch, channel) mean and std over spatial dims of an NCHW tensor."""
    m = mean(x, axis=(2, 3), keepdims=True)
    var = mean(mul(x - m, x - m), axis=(2, 3), keepdims=True)
    std = sqrt(var + eps)
    return m, std


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    m, std = instance_stats(x, eps)
    return (x - m) / std


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    m = mean(x, axis=-1, keepdims=True)
    var = mean(mul(x - m, x - m), axis=-1, keepdims=True)
    normed = (x - m) / sqrt(var + eps)
    return normed * gain + bias


def custom_op(inputs, out_data, backward_fn) -> Tensor:
    """Wrap an external computation (renderer, codec) into the graph.

    backward_fn(grad_out) must return one gradient array (or None) per input.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    return Tensor(out_data, _parents=inputs, _backward=backward_fn)
