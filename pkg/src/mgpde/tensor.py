"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tape` records every operation executed while it is active (``with
Tape() as tape:``). Tapes are thread-local, so each worker thread owns its own.
:func:`backward` walks the recorded nodes once, in reverse insertion order, and
returns a gradient map keyed by the leaf tensors that required gradients.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    leaf: Tensor | None = None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def _node_of(self, t: Tensor) -> int:
        """Node index of ``t`` on this tape; registers tracked leaves lazily."""
        if t._tape is self:
            return t._node
        if not t.requires_grad:
            return -1
        self.nodes.append(Node("leaf", (), None, leaf=t))
        t._tape = self
        t._node = len(self.nodes) - 1
        return t._node


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(
    op: str,
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it on the active tape.

    ``backward`` receives the gradient w.r.t. the output and returns one
    gradient (or ``None``) per parent, in order.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is None:
        return out
    ids = tuple(tape._node_of(p) for p in parents)
    if all(i < 0 for i in ids):
        return out
    tape.nodes.append(Node(op, ids, backward))
    out.requires_grad = True
    out._tape = tape
    out._node = len(tape.nodes) - 1
    return out


class Gradients(dict):
    """Gradient map from leaf tensor to ndarray (identity-keyed)."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def backward(tape: Tape, root: Tensor) -> Gradients:
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    grads = Gradients()
    if root._tape is not tape:
        return grads
    slots: list[np.ndarray | None] = [None] * len(tape.nodes)
    slots[root._node] = np.ones_like(root.data)
    for i in range(root._node, -1, -1):
        g = slots[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.leaf is not None:
            grads[node.leaf] = g
            continue
        pgrads = node.backward(g)
        for pid, pg in zip(node.parents, pgrads):
            if pid < 0 or pg is None:
                continue
            slots[pid] = pg if slots[pid] is None else slots[pid] + pg
        slots[i] = None
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        "div", ad / bd, (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return make_op(
        "sum", a.data.sum(axis=axes), (a,),
        lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),),
    )


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (n, m) in enumerate(zip(ref, t.shape)):
            if ax != axis % len(ref) and n != m:
                raise ShapeError(f"concat: extent mismatch on axis {ax} ({n} vs {m})")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    d = x.data
    scale = np.where(d > 0, 1.0, slope)
    return make_op("leaky_relu", d * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign keeps exp() from overflowing
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return make_op("log", np.log(d), (x,), lambda g: (g / d,))
