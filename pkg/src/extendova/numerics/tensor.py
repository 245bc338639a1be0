"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is a tape of :class:`Tensor` nodes.  Each operation records its
parents and a backward closure; ``Tensor.backward()`` walks the recorded
graph in reverse topological order and accumulates adjoints into ``.grad``.
Data is always float64 and row-major.  The operation set is deliberately
small: matrix product, broadcast add/mul, relu, row softmax / log-softmax,
log, sqrt, sigmoid / log-sigmoid, row L2-normalization, row and per-row
gathers, axis sums, and train-mode batch normalization.  Everything the
training objectives need is composed from these.

Graphs are rebuilt per iteration and never shared between threads.  A
node whose inputs all have ``requires_grad=False`` records nothing, so
inference passes pay no tape overhead.
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "mul",
    "matmul",
    "relu",
    "log",
    "sqrt",
    "sigmoid",
    "logsigmoid",
    "softmax_rows",
    "log_softmax_rows",
    "l2norm_rows",
    "take_rows",
    "take_cols",
    "take_per_row",
    "sum_all",
    "sum_axis",
    "mean_all",
    "batchnorm_train",
]

_NORM_FLOOR = 1e-12


class Tensor:
    """A float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accum(self, g: np.ndarray) -> None:
        # never mutate an adjoint in place; closures may share buffers
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if not self.requires_grad:
            raise ValueError("output does not depend on any tracked tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tracked = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(tracked)
    out._parents = tracked
    out._backward = backward if tracked else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(data, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        a._accum(g * mask)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt requires non-negative input")
    data = np.sqrt(a.data)

    def backward(g):
        # subgradient cap at zero keeps hinge losses with coincident
        # points finite; the forward value stays exact
        a._accum(g * 0.5 / np.maximum(data, _NORM_FLOOR))

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accum(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def logsigmoid(a) -> Tensor:
    """log(sigmoid(x)), computed without overflow for large |x|."""
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                    x - np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        # d/dx log sigma(x) = sigma(-x)
        xn = -x
        s = np.where(xn >= 0, 1.0 / (1.0 + np.exp(-np.abs(xn))),
                     np.exp(-np.abs(xn)) / (1.0 + np.exp(-np.abs(xn))))
        a._accum(g * s)

    return _make(data, (a,), backward)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("softmax_rows expects a 2-d tensor")
    if a.data.shape[1] == 0:
        raise ValueError("softmax over an empty class axis")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=1, keepdims=True)
        a._accum(data * (g - inner))

    return _make(data, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("log_softmax_rows expects a 2-d tensor")
    if a.data.shape[1] == 0:
        raise ValueError("softmax over an empty class axis")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        a._accum(g - soft * g.sum(axis=1, keepdims=True))

    return _make(data, (a,), backward)


def l2norm_rows(a) -> Tensor:
    """Normalize each row to unit Euclidean length.

    Raises :class:`DegenerateInputError` if any row norm falls below the
    representable floor; a zero direction is a modelling bug upstream.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("l2norm_rows expects a 2-d tensor")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateInputError("cannot normalize a (near-)zero row")
    data = a.data / norms

    def backward(g):
        inner = (g * data).sum(axis=1, keepdims=True)
        a._accum((g - data * inner) / norms)

    return _make(data, (a,), backward)


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a._accum(acc)

    return _make(data, (a,), backward)


def take_cols(a, idx) -> Tensor:
    """Column gather of a 2-d tensor: out[:, j] = a[:, idx[j]]."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ValueError("take_cols expects a 2-d tensor")
    data = a.data[:, idx]

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc.T, idx, g.T)
        a._accum(acc)

    return _make(data, (a,), backward)


def take_per_row(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-d tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ValueError("take_per_row expects (B, C) tensor and (B,) index")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, idx), g)
        a._accum(acc)

    return _make(data, (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def backward(g):
        a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(data, (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ValueError("mean of an empty tensor")
    return mul(sum_all(a), 1.0 / a.data.size)


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    """Batch normalization over axis 0 using the batch's own statistics.

    Returns ``(out, batch_mean, batch_var)``; the caller owns the running
    statistics and decides whether to fold the batch stats in.  Variance
    is biased (1/B), matching the normalizer in the forward pass.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ValueError("batchnorm_train expects a 2-d tensor")
    b = x.data.shape[0]
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            term = gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0)
            x._accum(term * inv_std)

    out = _make(data, (x, gamma, beta), backward)
    return out, mu, var
