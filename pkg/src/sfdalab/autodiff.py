"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is an append-only tape.  Operations record a node only when at
least one input is tracked (``requires_grad``); constants flow through without
touching the tape.  :func:`backward` walks the tape in reverse insertion order,
which is a valid reverse topological order because every node is appended after
its inputs exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's rule."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    """A float64 array with an optional gradient slot.

    ``graph`` is set for tensors that were created as tracked leaves or that
    are outputs of recorded operations.
    """

    __slots__ = ("data", "grad", "requires_grad", "graph", "name")

    def __init__(self, data, requires_grad: bool = False, graph: Optional["Graph"] = None,
                 name: str = ""):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.graph = graph
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = ", tracked" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar, each forwards to the module-level op
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Graph:
    """Append-only tape of recorded operations."""

    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    def param(self, data, name: str = "") -> Tensor:
        """Create a tracked leaf tensor owned by this graph."""
        t = Tensor(data, requires_grad=True, graph=self, name=name)
        self.leaves.append(t)
        return t

    def zero_grad(self) -> None:
        for t in self.leaves:
            t.grad = np.zeros_like(t.data)
        for node in self.nodes:
            node.output.grad = np.zeros_like(node.output.data)

    def clear(self) -> None:
        """Drop the tape so intermediates are freed without waiting for the cycle collector."""
        for node in self.nodes:
            node.output.graph = None
            node.backward_fn = None
        self.nodes = []
        for t in self.leaves:
            t.graph = None
        self.leaves = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    graph = None
    for t in inputs:
        if t.requires_grad:
            if graph is not None and t.graph is not graph:
                raise ValueError(f"{op}: inputs belong to different graphs")
            graph = t.graph
    if graph is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True, graph=graph)
    graph.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def div_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Divide every entry of ``a`` by the scalar tensor ``s``."""
    a, s = _as_tensor(a), _as_tensor(s)
    if s.data.size != 1 or s.data.ndim != 0:
        raise ShapeError("div_scalar", a.shape, s.shape)
    ad, sv = a.data, float(s.data)
    out = ad / sv

    def back(g):
        return g / sv, np.array(-np.sum(g * ad) / (sv * sv))

    return _record("div_scalar", (a, s), out, back)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """``log(max(x, floor))``; gradient is zero where the floor is active."""
    a = _as_tensor(a)
    active = a.data > floor
    safe = np.where(active, a.data, floor)
    return _record("log", (a,), np.log(safe), lambda g: (np.where(active, g / safe, 0.0),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = _as_tensor(a)
    active = a.data > floor
    return _record("clamp_min", (a,), np.where(active, a.data, floor),
                   lambda g: (g * active,))


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        out = np.array(np.sum(a.data))
        return _record("sum", (a,), out, lambda g: (np.broadcast_to(g, shape).copy(),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.data.ndim for ax in axes)
    out = np.sum(a.data, axis=axes)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _record("sum", (a,), out, back)


def mean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis), 1.0 / n)


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into a 1-D tensor."""
    items = [_as_tensor(t) for t in items]
    for t in items:
        if t.data.ndim != 0:
            raise ShapeError("stack_scalars", t.shape, ())
    out = np.array([float(t.data) for t in items])
    n = len(items)
    return _record("stack_scalars", tuple(items), out,
                   lambda g: tuple(np.array(g[i]) for i in range(n)))


def index(a: Tensor, i: int) -> Tensor:
    """Select entry ``i`` along the leading axis."""
    a = _as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _record("index", (a,), a.data[i].copy(), back)


# ---------------------------------------------------------------------------
# network ops


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    """Softmax over ``axis`` (the channel axis for K x H x W logits)."""
    a = _as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (a,), out, back)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias of shape (C,) to a (C, H, W) tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 3 or b.shape != (x.shape[0],):
        raise ShapeError("bias_add", x.shape, b.shape)
    return _record("bias_add", (x, b), x.data + b.data[:, None, None],
                   lambda g: (g, g.sum(axis=(1, 2))))


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, 3, 3, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, h * w)


def conv2d_same(x: Tensor, k: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is (C_in, H, W) and ``k`` is (C_out, C_in, 3, 3).
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if (x.data.ndim != 3 or k.data.ndim != 4 or k.shape[2:] != (3, 3)
            or k.shape[1] != x.shape[0]):
        raise ShapeError("conv2d_same", x.shape, k.shape)
    c_in, h, w = x.shape
    c_out = k.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w)
    kmat = k.data.reshape(c_out, c_in * 9)
    out = (kmat @ cols).reshape(c_out, h, w)

    def back(g):
        gm = g.reshape(c_out, h * w)
        dk = (gm @ cols.T).reshape(k.shape) if k.requires_grad else None
        if not x.requires_grad:
            return None, dk
        dcols = (kmat.T @ gm).reshape(c_in, 3, 3, h, w)
        dxp = np.zeros((c_in, h + 2, w + 2))
        for dy in range(3):
            for dx in range(3):
                dxp[:, dy:dy + h, dx:dx + w] += dcols[:, dy, dx]
        return dxp[:, 1:-1, 1:-1], dk

    return _record("conv2d_same", (x, k), out, back)


# ---------------------------------------------------------------------------


def backward(graph: Graph, root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tracked tensor."""
    if root.data.size != 1 or root.data.ndim != 0:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root is not tracked; nothing to differentiate")
    if root.graph is not graph:
        raise ValueError("root does not belong to this graph")
    root.grad = np.ones_like(root.data)
    for node in reversed(graph.nodes):
        g = node.output.grad
        if g is None or not g.any():
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if t.requires_grad and gi is not None:
                t.grad = t.grad + gi


def gradcheck(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps a tensor to a scalar tensor using the ops of this module.  The
    relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    g = Graph()
    xt = g.param(x0.copy())
    root = f(xt)
    if not np.isfinite(root.data).all():
        raise ValueError(f"f(x) is not finite: {root.data}")
    backward(g, root)
    analytic = xt.grad

    def value(arr):
        return float(f(Tensor(arr)).data)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for j in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[j] += h
        xm[j] -= h
        numeric.reshape(-1)[j] = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
