"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every value in the model is a :class:`Tensor` wrapping a float32 or float64
ndarray.  Operations build a graph of backward closures; ``backward()`` on a
scalar walks the graph in reverse topological order and accumulates gradients
into the leaf tensors (the trainable parameters).

The op set is deliberately small: exactly what an LSTM encoder, a linear-chain
CRF and an attention decoder need.  All ops are batched (leading batch axis),
none of them loop over elements in Python.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / loss probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-dimensional real array, the single numeric currency of the model.

    ``data`` is row-major; dtype is float32 (training) or float64
    (verification).  ``grad`` is populated on leaves by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and plain ndarrays act as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; divide by a scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        data = self.data[idx]
        if isinstance(idx, np.ndarray) or (
            isinstance(idx, tuple) and any(isinstance(i, np.ndarray) for i in idx)
        ):
            raise TypeError("advanced indexing not supported; use rows()/pick()/gather_rc()")

        def back(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            return (full,)

        return _node(data, (self,), back)


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op result; attach the graph edge only when grads are wanted."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        return out
    return Tensor(data)


def _unary(x: Tensor, data: np.ndarray, grad_fn) -> Tensor:
    return _node(data, (x,), lambda g: (grad_fn(g),))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        data = a.data + b.data
        return _node(
            data,
            (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        )
    data = a.data + b
    return _node(data, (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        data = a.data * b.data
        return _node(
            data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            ),
        )
    data = a.data * b
    return _node(data, (a,), lambda g: (_unbroadcast(g * b, a.data.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul with broadcasting over leading batch dims (operands >= 2-d)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    data = np.matmul(a.data, b.data)

    def back(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return (ga, gb)

    return _node(data, (a, b), back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _unary(x, np.transpose(x.data, axes), lambda g: np.transpose(g, inv))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(old))


def broadcast_to(x: Tensor, shape) -> Tensor:
    data = np.broadcast_to(x.data, shape).copy()
    old = x.data.shape
    return _unary(x, data, lambda g: _unbroadcast(g, old))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(xs), back)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    data = np.stack([x.data for x in xs], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(data, tuple(xs), back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _unary(x, y, lambda g: g * (1.0 - y * y))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _unary(x, y, lambda g: g * y * (1.0 - y))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _unary(x, y, lambda g: g * y)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(data, (x,), back)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis) * (1.0 / n)


def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    ex = np.exp(x.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = ex / s
    data = out if keepdims else np.squeeze(out, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(data, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; -inf entries get weight exactly 0."""
    m = np.max(x.data, axis=axis, keepdims=True)
    ex = np.exp(x.data - m)
    y = ex / ex.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _node(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), back)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set positions where `mask` is True to `value` (a constant)."""
    data = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    keep = ~mask
    return _unary(x, data, lambda g: g * keep)


def rows(matrix: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = matrix[ids[...], :].  Backward scatter-adds."""
    ids = np.asarray(ids)
    data = matrix.data[ids]

    def back(g):
        gm = np.zeros_like(matrix.data)
        np.add.at(gm, ids.reshape(-1), g.reshape(-1, matrix.data.shape[1]))
        return (gm,)

    return _node(data, (matrix,), back)


def pick(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[b] = x[b, ids[b]] for a 2-d tensor."""
    ids = np.asarray(ids)
    n = x.data.shape[0]
    ar = np.arange(n)
    data = x.data[ar, ids]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ar, ids), g)
        return (gx,)

    return _node(data, (x,), back)


def gather_rc(x: Tensor, row_ids: np.ndarray, col_ids: np.ndarray) -> Tensor:
    """out[...] = x[..., row_ids[...], col_ids[...]] over the last two axes."""
    lead = x.data.shape[:-2]
    r, c = x.data.shape[-2:]
    flat = x.data.reshape(-1, r, c)
    ri = np.asarray(row_ids).reshape(-1)
    ci = np.asarray(col_ids).reshape(-1)
    ar = np.arange(flat.shape[0])
    data = flat[ar, ri, ci].reshape(lead)

    def back(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, (ar, ri, ci), g.reshape(-1))
        return (gx.reshape(x.data.shape),)

    return _node(data, (x,), back)


def _toposort(root: Tensor) -> list:
    order, visited = [], set()
    todo = [(root, False)]
    while todo:
        node, done = todo.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        todo.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                todo.append((p, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``."""
    if not root.requires_grad:
        raise ValueError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise ValueError("backward() without an explicit gradient needs a scalar")
        grad = np.ones_like(root.data)
    order = _toposort(root)
    pending: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: persist the accumulated gradient
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = pending.get(id(parent))
            pending[id(parent)] = pg if acc is None else acc + pg
