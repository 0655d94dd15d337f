"""Immutable expression graph over float64 arrays.

Gradients are built as ordinary expressions (see :mod:`.autodiff`), so the
result of :func:`grad` can be differentiated again.  All graph walks are
iterative: unrolled training loops produce graphs that are far deeper than
the interpreter's recursion limit.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import NumericOverflowError, ShapeError

LEAF_OPS = frozenset({"input", "const"})

_scope = threading.local()


@contextlib.contextmanager
def label_scope(label: str):
    """Nodes created inside the block without an explicit label get ``label``."""
    prev = getattr(_scope, "label", None)
    _scope.label = label
    try:
        yield
    finally:
        _scope.label = prev


class Expr:
    """A node in the computation graph.

    Nodes are never mutated after construction, compare by identity, and
    are safe to share between threads.  Values are not cached on the node;
    :class:`Program` keeps them per evaluation.
    """

    __slots__ = ("op", "children", "shape", "attr", "label")

    def __init__(self, op, children, shape, attr=None, label=None):
        self.op = op
        self.children = tuple(children)
        self.shape = tuple(int(s) for s in shape)
        self.attr = attr
        self.label = label if label is not None else getattr(_scope, "label", None)

    def __repr__(self):
        name = f" {self.label!r}" if self.label else ""
        return f"<Expr {self.op}{name} shape={self.shape}>"

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def name(self):
        """Binding name of an input node (None otherwise)."""
        return self.attr if self.op == "input" else None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------- leaves

def input(name: str, shape: Sequence[int], label: str | None = None) -> Expr:
    return Expr("input", (), shape, attr=str(name), label=label or str(name))


def const(value, label: str | None = None) -> Expr:
    arr = np.array(value, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericOverflowError(f"non-finite constant {label or ''}".strip(), label)
    arr.setflags(write=False)
    return Expr("const", (), arr.shape, attr=arr, label=label)


def zeros(shape) -> Expr:
    return const(np.zeros(shape))


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return const(x)


# ---------------------------------------------------------- broadcasting

def broadcast_to(x, shape) -> Expr:
    x = as_expr(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        out = np.broadcast_shapes(x.shape, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    if out != shape:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    return Expr("broadcast", (x,), shape, attr=shape)


def sum_to(x, shape) -> Expr:
    """Reduce ``x`` by summation to ``shape`` (the adjoint of broadcast)."""
    x = as_expr(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        if np.broadcast_shapes(x.shape, shape) != x.shape:
            raise ValueError
    except ValueError as exc:
        raise ShapeError(f"cannot sum {x.shape} down to {shape}") from exc
    return Expr("sum_to", (x,), shape, attr=shape)


def _binary(op, a, b):
    a, b = as_expr(a), as_expr(b)
    if a.shape != b.shape:
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc
        a, b = broadcast_to(a, shape), broadcast_to(b, shape)
    return Expr(op, (a, b), a.shape)


def add(a, b) -> Expr:
    return _binary("add", a, b)


def sub(a, b) -> Expr:
    return _binary("sub", a, b)


def mul(a, b) -> Expr:
    return _binary("mul", a, b)


def div(a, b) -> Expr:
    return _binary("div", a, b)


def scale(x, c: float) -> Expr:
    x = as_expr(x)
    c = float(c)
    if c == 1.0:
        return x
    return Expr("scale", (x,), x.shape, attr=c)


def matmul(a, b) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Expr("matmul", (a, b), (a.shape[0], b.shape[1]))


def transpose(x) -> Expr:
    x = as_expr(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    return Expr("transpose", (x,), x.shape[::-1])


def relu(x) -> Expr:
    x = as_expr(x)
    return Expr("relu", (x,), x.shape)


def step(x) -> Expr:
    """Heaviside mask 1[x > 0]; zero gradient everywhere."""
    x = as_expr(x)
    return Expr("step", (x,), x.shape)


def exp(x) -> Expr:
    x = as_expr(x)
    return Expr("exp", (x,), x.shape)


def sqrt(x) -> Expr:
    x = as_expr(x)
    return Expr("sqrt", (x,), x.shape)


def log_softmax(x) -> Expr:
    """Log-softmax over the last axis."""
    x = as_expr(x)
    if x.ndim == 0:
        raise ShapeError("log_softmax needs at least one axis")
    return Expr("log_softmax", (x,), x.shape)


def softmax(x) -> Expr:
    return exp(log_softmax(x))


def sum(x, axis: int | None = None, keepdims: bool = False) -> Expr:  # noqa: A001
    x = as_expr(x)
    if axis is None:
        return Expr("sum", (x,), (), attr=None)
    if not keepdims:
        raise ShapeError("sum over an axis requires keepdims=True")
    axis = axis % x.ndim
    shape = list(x.shape)
    shape[axis] = 1
    return Expr("sum", (x,), shape, attr=axis)


def dot(a, b) -> Expr:
    """Full contraction sum(a * b)."""
    return sum(mul(a, b))


def sumsq(x) -> Expr:
    return dot(x, x)


# ----------------------------------------------------------- evaluation

def _sum_to_value(v, shape):
    extra = v.ndim - len(shape)
    if extra:
        v = v.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (s, t) in enumerate(zip(v.shape, shape)) if t == 1 and s != 1)
    if axes:
        v = v.sum(axis=axes, keepdims=True)
    return v


def _log_softmax_value(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _sum_value(v, axis):
    if axis is None:
        return np.asarray(v.sum())
    return v.sum(axis=axis, keepdims=True)


_FORWARD = {
    "add": lambda n, a, b: a + b,
    "sub": lambda n, a, b: a - b,
    "mul": lambda n, a, b: a * b,
    "div": lambda n, a, b: a / b,
    "scale": lambda n, a: a * n.attr,
    "matmul": lambda n, a, b: a @ b,
    "transpose": lambda n, a: a.T,
    "relu": lambda n, a: np.maximum(a, 0.0),
    "step": lambda n, a: (a > 0.0).astype(np.float64),
    "exp": lambda n, a: np.exp(a),
    "sqrt": lambda n, a: np.sqrt(a),
    "log_softmax": lambda n, a: _log_softmax_value(a),
    "sum": lambda n, a: _sum_value(a, n.attr),
    "broadcast": lambda n, a: np.broadcast_to(a, n.attr),
    "sum_to": lambda n, a: _sum_to_value(a, n.attr),
}


def topo_order(outputs: Iterable[Expr]) -> list[Expr]:
    """Children-before-parents ordering of every node reachable from outputs."""
    order: list[Expr] = []
    visited: set[int] = set()
    stack = [(o, False) for o in reversed(list(outputs))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in reversed(node.children):
            if id(child) not in visited:
                stack.append((child, False))
    return order


class Program:
    """A fixed evaluation schedule for one or more output expressions.

    Building the schedule walks the graph once; :meth:`run` can then be
    called repeatedly with fresh bindings.  Evaluation is strictly
    sequential in schedule order, so results are bit-reproducible.
    """

    def __init__(self, outputs: Sequence[Expr] | Expr):
        if isinstance(outputs, Expr):
            outputs = [outputs]
        self.outputs = list(outputs)
        self.order = topo_order(self.outputs)
        self.inputs: dict[str, list[Expr]] = {}
        for node in self.order:
            if node.op == "input":
                self.inputs.setdefault(node.attr, []).append(node)
        index = {id(n): i for i, n in enumerate(self.order)}
        self._child_idx = [tuple(index[id(c)] for c in n.children) for n in self.order]
        self._out_idx = [index[id(o)] for o in self.outputs]

    def __len__(self):
        return len(self.order)

    def run(self, bindings: Mapping[str, np.ndarray] | None = None) -> list[np.ndarray]:
        bindings = bindings or {}
        vals: list = [None] * len(self.order)
        with np.errstate(all="ignore"):
            for i, node in enumerate(self.order):
                op = node.op
                if op == "const":
                    v = node.attr
                elif op == "input":
                    try:
                        raw = bindings[node.attr]
                    except KeyError:
                        raise ShapeError(f"no binding for input {node.attr!r}") from None
                    v = np.asarray(raw, dtype=np.float64)
                    if v.shape != node.shape:
                        raise ShapeError(
                            f"binding for input {node.attr!r} has shape {v.shape}, "
                            f"expected {node.shape}"
                        )
                else:
                    v = _FORWARD[op](node, *[vals[j] for j in self._child_idx[i]])
                    if v.ndim == 0:
                        if not math.isfinite(v):
                            self._overflow(i, node)
                    elif not np.isfinite(v).all():
                        self._overflow(i, node)
                vals[i] = v
        return [np.array(vals[j], dtype=np.float64) for j in self._out_idx]

    @staticmethod
    def _overflow(i, node):
        what = node.label or node.op
        raise NumericOverflowError(f"non-finite value produced at node #{i} ({what})", node.label)


def evaluate(expr, bindings: Mapping[str, np.ndarray] | None = None):
    """Evaluate one expression (or a list of them) under ``bindings``."""
    if isinstance(expr, Expr):
        return Program([expr]).run(bindings)[0]
    return Program(list(expr)).run(bindings)
