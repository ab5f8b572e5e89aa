"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient and a closure that
propagates incoming gradients to its parents.  The graph is taped by
construction; ``backward`` walks it once in reverse topological order.
Only the operations the policy-value networks need are provided: dense and
convolution layers, LSTM-cell arithmetic, softmax heads and the reductions
of the PPO objective.

Dtype follows the inputs (float32 for training, float64 for gradient
checks); large reductions accumulate in float64.
"""

from __future__ import annotations

import numpy as np


class GraphError(RuntimeError):
    """Contract violation while building or differentiating the graph."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, parents=(), backward=None):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, grad={self.grad is not None})"

    # Convenience operators; scalars are promoted to the tensor dtype.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(values, rng=None) -> Tensor:
    return Tensor(np.asarray(values), requires_grad=True)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(tensor, grad):
    grad = np.asarray(grad, dtype=tensor.values.dtype)
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.values)
    tensor.grad += _unbroadcast(grad, tensor.values.shape)


# -- primitive operations ----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values + b.values, parents=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g)
        out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values - b.values, parents=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, -g)
        out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values * b.values, parents=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g * b.values)
            if b.requires_grad:
                _accum(b, g * a.values)
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values @ b.values, parents=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g @ b.values.T)
            if b.requires_grad:
                _accum(b, a.values.T @ g)
        out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    out = Tensor(np.where(mask, a.values, 0.0).astype(a.dtype), parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * mask)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    out = Tensor(y, parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * (1.0 - y * y))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.values))
    out = Tensor(y.astype(a.dtype), parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    out = Tensor(y, parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * y)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.values), parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g / a.values)
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.values * a.values, parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, 2.0 * g * a.values)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.values <= b.values
    out = Tensor(np.where(take_a, a.values, b.values), parents=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g * take_a)
            if b.requires_grad:
                _accum(b, g * ~take_a)
        out._backward = backward
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.values >= lo) & (a.values <= hi)
    out = Tensor(np.clip(a.values, lo, hi), parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * inside)
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    y = np.sum(a.values, axis=axis, dtype=np.float64).astype(a.dtype)
    out = Tensor(y, parents=(a,))
    if out.requires_grad:
        def backward(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, a.values.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.values.shape))
        out._backward = backward
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.values.size if axis is None else a.values.shape[axis]
    y = np.sum(a.values, axis=axis, dtype=np.float64) / count
    out = Tensor(y.astype(a.dtype), parents=(a,))
    if out.requires_grad:
        def backward(g):
            scaled = np.asarray(g) / count
            if axis is None:
                _accum(a, np.broadcast_to(scaled, a.values.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(scaled, axis),
                                          a.values.shape))
        out._backward = backward
    return out


def concat(tensors, axis=-1) -> Tensor:
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis),
                 parents=tuple(tensors))
    if out.requires_grad:
        sizes = [t.values.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    _accum(t, piece)
        out._backward = backward
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.values[..., start:stop], parents=(a,))
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(a.values)
            full[..., start:stop] = g
            _accum(a, full)
        out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.values.reshape(shape), parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, np.asarray(g).reshape(a.values.shape))
    return out


def gather_rows(a: Tensor, indices) -> Tensor:
    """Pick one column per row: out[i] = a[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.values.shape[0])
    out = Tensor(a.values[rows, idx], parents=(a,))
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(a.values)
            np.add.at(full, (rows, idx), g)
            _accum(a, full)
        out._backward = backward
    return out


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log softmax over the last axis, shift-stable."""
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = (shifted - lse).astype(a.dtype)
    out = Tensor(y, parents=(a,))
    if out.requires_grad:
        def backward(g):
            p = np.exp(y)
            _accum(a, g - p * np.sum(g, axis=-1, keepdims=True))
        out._backward = backward
    return out


def softmax(a: Tensor) -> Tensor:
    return exp(log_softmax(a))


def conv2d(x: Tensor, w: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """NHWC convolution with an OIHW-free layout: w is (kh, kw, cin, cout)."""
    xv = x.values
    kh, kw, cin, cout = w.values.shape
    b, h, www, c = xv.shape
    if c != cin:
        raise GraphError(f"conv input channels {c} != kernel {cin}")
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (www + 2 * pad - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]        # (b, oh, ow, cin, kh, kw)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, kh * kw * cin)
    w2 = w.values.reshape(kh * kw * cin, cout)
    y = (cols @ w2).reshape(b, oh, ow, cout)
    out = Tensor(y.astype(xv.dtype), parents=(x, w))
    if out.requires_grad:
        def backward(g):
            g2 = np.asarray(g).reshape(b * oh * ow, cout)
            if w.requires_grad:
                _accum(w, (cols.T @ g2).reshape(kh, kw, cin, cout))
            if x.requires_grad:
                dcols = (g2 @ w2.T).reshape(b, oh, ow, kh, kw, cin)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + oh * stride:stride,
                            j:j + ow * stride:stride] += dcols[:, :, :, i, j]
                _accum(x, dxp[:, pad:pad + h, pad:pad + www])
        out._backward = backward
    return out


# -- graph traversal ----------------------------------------------------------

def _topo_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
        else:
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into every reachable
    ``requires_grad`` tensor's ``grad``."""
    if loss.values.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any parameter")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
