"""A small tape-free reverse-mode differentiation engine over numpy arrays.

Only the operations the denoiser needs are provided.  A node records its
parents and a backward closure only when at least one parent requires a
gradient, so running a model whose parameters are wrapped as constants costs
no bookkeeping at all.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "param",
    "const",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "leaky_relu",
    "relu",
    "concat",
    "take",
    "reshape",
    "sum_axis",
    "mean",
    "mean_axis",
    "softmax",
    "square",
    "mse",
]


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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


def param(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def const(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _node(value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, tuple(parents), backward_fn, requires_grad=True)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = const(x)
    pos = x.value > 0
    scale = np.where(pos, 1.0, slope)
    return _node(x.value * scale, (x,), lambda g: (g * scale,))


def relu(x) -> Tensor:
    return leaky_relu(x, slope=0.0)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [const(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), parts, bw)


def take(x, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; the backward pass scatter-adds into rows."""
    x = const(x)
    index = np.asarray(index)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (out,)

    return _node(x.value[index], (x,), bw)


def reshape(x, shape: tuple) -> Tensor:
    x = const(x)
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = const(x)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.value.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = const(x)
    return mul(sum_axis(x, axis, keepdims), 1.0 / x.shape[axis])


def mean(x) -> Tensor:
    x = const(x)
    shape, n = x.shape, x.value.size
    return _node(np.mean(x.value), (x,), lambda g: (np.full(shape, g / n),))


def softmax(x, axis: int = -1) -> Tensor:
    """Log-sum-exp stabilised softmax along ``axis``."""
    x = const(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw)


def square(x) -> Tensor:
    x = const(x)
    xv = x.value
    return _node(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def mse(pred, target) -> Tensor:
    return mean(square(sub(pred, target)))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) to every reachable leaf.

    Returns a mapping from ``id(leaf)`` to its gradient.  When ``wrt`` is given,
    every tensor in it receives an entry, zero-filled if unreachable.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(_toposort(loss)):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    leaves = {}
    if wrt is not None:
        for t in wrt:
            g = grads.get(id(t))
            leaves[id(t)] = np.zeros_like(t.value) if g is None else g
        return leaves
    return grads
