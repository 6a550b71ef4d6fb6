"""Array-valued reverse-mode autodiff.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients.  ``backward`` builds a
:class:`ComputeGraph` (topological order of the nodes reachable from the
loss) and walks it in reverse.  Leaf tensors accumulate into ``.grad``;
parameter leaves handed out by a ``ParamSet`` have ``.grad`` aliased to the
set's flat gradient buffer, so a backward pass fills ``ParamSet.grads``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class GraphError(RuntimeError):
    """Invalid use of a compute graph (stale graph, non-scalar loss...)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op",
                 "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, grad: np.ndarray | None = None,
                 _parents: Sequence["Tensor"] = (), _backward: Callable | None = None,
                 _op: str = "leaf"):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, _op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class ComputeGraph:
    """Nodes reachable from a loss, in topological (creation-consistent) order."""

    def __init__(self, loss: Tensor):
        order: list[Tensor] = []
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
        self.nodes = order
        self.loss = loss

    def backward(self) -> None:
        loss = self.loss
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if loss._consumed:
            raise GraphError("backward already run on this graph; run a fresh forward pass")
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is None:
                    continue
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            node._consumed = True
            if g is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # release closures so saved activations can be freed
        for node in self.nodes:
            if not node.is_leaf:
                node._backward = _stale


def _stale(g):
    raise GraphError("backward already run on this graph; run a fresh forward pass")


def backward(loss: Tensor) -> None:
    """Populate leaf gradients for a scalar ``loss``."""
    if loss._consumed:
        raise GraphError("backward already run on this graph; run a fresh forward pass")
    ComputeGraph(loss).backward()


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    return _make(out, (a,), lambda g: (g * c,), "scale")


def sin(a: Tensor) -> Tensor:
    out = np.sin(a.data)
    return _make(out, (a,), lambda g: (g * np.cos(a.data),), "sin")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    return _make(out, (a,), lambda g: (2.0 * a.data * g,), "square")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum())
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())
    return _make(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def mse(a, b) -> Tensor:
    """Mean squared error; a single node so the backward pass is one fused rule."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.mean(diff * diff))
    n = diff.size

    def fn(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(a.dtype, copy=False), (-ga).astype(b.dtype, copy=False)

    return _make(out, (a, b), fn, "mse")


# ---------------------------------------------------------------- shape / linear

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


def linear_map(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray], name: str = "linear_map") -> Tensor:
    """Apply a fixed linear operator whose transpose is ``adjoint``."""
    out = np.asarray(forward(x.data))
    return _make(out, (x,), lambda g: (np.asarray(adjoint(g)).astype(x.dtype, copy=False),), name)
