"""Reverse-mode automatic differentiation over float64 numpy arrays.

A training step builds a fresh graph of :class:`Node` objects; calling
:func:`backward` on the scalar loss walks the recorded operations in
reverse and accumulates vector-Jacobian products into each requested
leaf.  The op set is deliberately small: exactly what a feed-forward
tanh network with a diagonal-Gaussian head and a log-sigmoid preference
loss needs.

Everything is computed in float64 so that analytic gradients can be
validated against central finite differences at tight tolerances.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence, Union

import numpy as np

ArrayLike = Union["Node", np.ndarray, float, int]

_node_counter = itertools.count()


class NonFiniteLossError(ArithmeticError):
    """Raised when a loss (or one of its intermediates) is not finite."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class Node:
    """One recorded value in the computation graph.

    ``parents`` and ``vjps`` together form the tape entry: ``vjps[i]``
    maps the adjoint of this node to the adjoint contribution of
    ``parents[i]``.  ``order`` is the creation index, used to report the
    first non-finite intermediate when a loss blows up.
    """

    __slots__ = ("value", "parents", "vjps", "needs_grad", "order", "op")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = (),
        needs_grad: bool = False,
        op: str = "leaf",
    ):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.needs_grad = needs_grad
        self.order = next(_node_counter)
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other: ArrayLike) -> "Node":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Node":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Node":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Node":
        return matmul(self, other)


def leaf(value: np.ndarray) -> Node:
    """Wrap an array as a differentiable leaf (a parameter)."""
    return Node(np.asarray(value, dtype=np.float64), needs_grad=True, op="param")


def constant(value: ArrayLike) -> Node:
    """Wrap an array as a non-differentiable input (data)."""
    return Node(np.asarray(value, dtype=np.float64), op="const")


def _as_node(x: ArrayLike) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint back down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(value, parents_and_vjps, op: str) -> Node:
    # Record vjps only toward parents that can reach a parameter.
    parents = tuple(p for p, _ in parents_and_vjps if p.needs_grad)
    vjps = tuple(f for p, f in parents_and_vjps if p.needs_grad)
    return Node(value, parents, vjps, needs_grad=bool(parents), op=op)


def add(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = a.value + b.value
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ],
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = a.value - b.value
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ],
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = a.value * b.value
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ],
        "mul",
    )


def scale(a: ArrayLike, c: float) -> Node:
    a = _as_node(a)
    return _make(a.value * c, [(a, lambda g: g * c)], "scale")


def matmul(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = a.value @ b.value
    return _make(
        out,
        [
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ],
        "matmul",
    )


def tanh(a: ArrayLike) -> Node:
    a = _as_node(a)
    t = np.tanh(a.value)
    return _make(t, [(a, lambda g: g * (1.0 - t * t))], "tanh")


def exp(a: ArrayLike) -> Node:
    a = _as_node(a)
    e = np.exp(a.value)
    return _make(e, [(a, lambda g: g * e)], "exp")


def log(a: ArrayLike) -> Node:
    a = _as_node(a)
    return _make(np.log(a.value), [(a, lambda g: g / a.value)], "log")


def square(a: ArrayLike) -> Node:
    a = _as_node(a)
    return _make(a.value * a.value, [(a, lambda g: g * (2.0 * a.value))], "square")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Evaluate both branches on safe inputs to avoid overflow warnings.
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(a: ArrayLike) -> Node:
    """log(1 + exp(x)), computed without overflow for large |x|."""
    a = _as_node(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, [(a, lambda g: g * _sigmoid(x))], "softplus")


def log_sigmoid(a: ArrayLike) -> Node:
    """log sigma(x) as -softplus(-x); stable for large |x|."""
    return scale(softplus(scale(a, -1.0)), -1.0)


def sum_(a: ArrayLike, axis: int | None = None) -> Node:
    a = _as_node(a)
    out = np.asarray(a.value.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy()

    return _make(out, [(a, vjp)], "sum")


def mean(a: ArrayLike, axis: int | None = None) -> Node:
    a = _as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def _first_non_finite(root: Node) -> Node | None:
    """Earliest-created node with a non-finite value reachable from root."""
    seen: set[int] = set()
    stack = [root]
    worst: Node | None = None
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not np.all(np.isfinite(node.value)):
            if worst is None or node.order < worst.order:
                worst = node
        stack.extend(node.parents)
    return worst


def backward(loss: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of a scalar loss with respect to the given leaves.

    Leaves that do not participate in the loss receive zero gradients.
    Raises :class:`NonFiniteLossError` naming the first non-finite
    intermediate when the loss is NaN or infinite.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    if not np.all(np.isfinite(loss.value)):
        culprit = _first_non_finite(loss)
        op = culprit.op if culprit is not None else "unknown"
        raise NonFiniteLossError(
            f"loss is non-finite; first non-finite intermediate produced by op '{op}'",
            op=op,
        )

    # Iterative post-order topological sort over the needs_grad subgraph.
    OPEN, DONE = 0, 1
    topo: list[Node] = []
    state: dict[int, int] = {}
    stack: list[Node] = [loss]
    while stack:
        node = stack.pop()
        mark = state.get(id(node))
        if mark == DONE:
            continue
        if mark is None:
            state[id(node)] = OPEN
            stack.append(node)
            for p in node.parents:
                if state.get(id(p)) != DONE:
                    stack.append(p)
        else:
            state[id(node)] = DONE
            topo.append(node)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contribution = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = contribution if acc is None else acc + contribution

    return [grads.get(id(p), np.zeros_like(p.value)) for p in wrt]
