"""A small tape-free reverse-mode autodiff over float64 numpy arrays.

Each :class:`Tensor` keeps references to its parents and a closure that pushes
its gradient back to them. ``backward()`` topologically sorts the graph once and
runs the closures in reverse order. Only the operations needed by the MLPs,
mixing formulas, attack objectives and training losses are provided.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    # Sum out the axes numpy broadcasting added or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # Make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator.
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: Array | float | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, Array] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _node(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
        )

    return _node(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bw(g):
        return (
            (a, g @ b.data.T if a.requires_grad else None),
            (b, a.data.T @ g if b.requires_grad else None),
        )

    return _node(out, (a, b), bw)


# -- unary functions -----------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: ((a, g * mask),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def _sigmoid(z: Array) -> Array:
    # Branch-free stable logistic.
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def softplus(a: Tensor) -> Tensor:
    z = a.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _node(out, (a,), lambda g: ((a, g * _sigmoid(z)),))


def maximum(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) with a constant floor; zero gradient where clamped."""
    mask = a.data > floor
    return _node(np.where(mask, a.data, floor), (a,), lambda g: ((a, g * mask),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: ((a, g * mask),))


# -- reductions and shape ops ---------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _node(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def tmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max along one axis; the gradient goes to the first arg-max entry."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return ((a, full),)

    return _node(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: ((a, g.T),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return ((a, full),)

    return _node(np.array(out, copy=True), (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        parts = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append((t, g[tuple(sl)]))
        return tuple(parts)

    return _node(out, ts, bw)


# -- softmax family ------------------------------------------------------------
def _softmax(z: Array, axis: int = -1) -> Array:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _softmax(a.data, axis)

    def bw(g):
        return ((a, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _node(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((a, g - p * g.sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw)
