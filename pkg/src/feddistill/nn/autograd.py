"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Operations on tensors that require
gradients record a closure on the result; :func:`backward` walks the recorded
graph in reverse topological order and accumulates gradients.

Tensors with ``requires_grad=False`` are constants: nothing is recorded for
an op whose inputs are all constants, so frozen models cost no graph memory.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_EPS = 1e-12

# Flip on to make every op check its output for NaN/Inf.
DEBUG_FINITE = False


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Differentiate scalar ``loss`` and return one gradient per entry of ``params``.

    Parameters that the loss does not depend on (or a loss with no recorded
    graph at all) get zero gradients. Existing ``.grad`` fields on the graph
    are cleared first, so calls do not accumulate across steps.
    """
    params = list(params)
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    if loss.requires_grad:
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        for node in order:
            node.grad = None
        for p in params:
            p.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    grads = []
    for p in params:
        if p.grad is None:
            grads.append(np.zeros_like(p.data))
        else:
            grads.append(p.grad)
    return grads


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def log(x, eps: float = LOG_EPS) -> Tensor:
    """``log(max(x, eps))``; the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, eps)

    def bw(g):
        _accum(x, np.where(x.data > eps, g / clamped, 0.0))

    return _make(np.log(clamped), (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(x.data * mask, (x,), bw)


# -- reductions and shape ----------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


# -- linear algebra and layers ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def softmax(z, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``z / temperature`` with max subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = as_tensor(z)
    s = z.data / temperature
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accum(z, p * (g - inner) / temperature)

    return _make(p, (z,), bw)


def conv2d(x, w, b=None) -> Tensor:
    """Cross-correlation, stride 1, no padding. x: (N,C,H,W), w: (O,C,k,k)."""
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[-1]
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))  # N,C,H',W',k,k
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        if w.requires_grad:
            _accum(w, np.einsum("nchwij,nohw->ocij", win, g, optimize=True))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            gwin = sliding_window_view(gp, (k, k), axis=(2, 3))
            flipped = w.data[:, :, ::-1, ::-1]
            _accum(x, np.einsum("nohwij,ocij->nchw", gwin, flipped, optimize=True))

    return _make(out, parents, bw)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    xc = x.data[:, :, : ho * size, : wo * size]
    blocks = xc.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * size, : wo * size] = (
            gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        )
        _accum(x, gx)

    return _make(out, (x,), bw)
