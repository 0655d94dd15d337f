"""Symbolic reverse mode: gradients come back as expressions."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError
from . import expr as E
from .expr import Expr, topo_order


def _rule_add(node, g, need):
    return [g if need[0] else None, g if need[1] else None]


def _rule_sub(node, g, need):
    return [g if need[0] else None, -g if need[1] else None]


def _rule_mul(node, g, need):
    a, b = node.children
    return [E.mul(g, b) if need[0] else None, E.mul(g, a) if need[1] else None]


def _rule_div(node, g, need):
    a, b = node.children
    ga = E.div(g, b) if need[0] else None
    gb = -E.div(E.mul(g, node), b) if need[1] else None
    return [ga, gb]


def _rule_scale(node, g, need):
    return [E.scale(g, node.attr)]


def _rule_matmul(node, g, need):
    a, b = node.children
    ga = E.matmul(g, E.transpose(b)) if need[0] else None
    gb = E.matmul(E.transpose(a), g) if need[1] else None
    return [ga, gb]


def _rule_transpose(node, g, need):
    return [E.transpose(g)]


def _rule_relu(node, g, need):
    # subgradient at exactly zero is 0: step() is 1[x > 0]
    return [E.mul(g, E.step(node.children[0]))]


def _rule_exp(node, g, need):
    return [E.mul(g, node)]


def _rule_sqrt(node, g, need):
    return [E.scale(E.div(g, node), 0.5)]


def _rule_log_softmax(node, g, need):
    probs = E.exp(node)
    return [E.sub(g, E.mul(probs, E.sum(g, axis=-1, keepdims=True)))]


def _rule_sum(node, g, need):
    return [E.broadcast_to(g, node.children[0].shape)]


def _rule_broadcast(node, g, need):
    return [E.sum_to(g, node.children[0].shape)]


def _rule_sum_to(node, g, need):
    return [E.broadcast_to(g, node.children[0].shape)]


_RULES = {
    "add": _rule_add,
    "sub": _rule_sub,
    "mul": _rule_mul,
    "div": _rule_div,
    "scale": _rule_scale,
    "matmul": _rule_matmul,
    "transpose": _rule_transpose,
    "relu": _rule_relu,
    "exp": _rule_exp,
    "sqrt": _rule_sqrt,
    "log_softmax": _rule_log_softmax,
    "sum": _rule_sum,
    "broadcast": _rule_broadcast,
    "sum_to": _rule_sum_to,
}
# ops whose output is piecewise constant in their inputs
_ZERO_GRAD = frozenset({"step"})


def grad(output: Expr, wrt: Sequence[str | Expr], shapes: dict | None = None) -> list[Expr]:
    """Gradient expressions of scalar ``output`` with respect to ``wrt``.

    Entries of ``wrt`` are input names or graph nodes.  A name bound to
    several input nodes gets the sum of their adjoints.  Anything not in
    the graph yields a zero constant of its shape (taken from the node, or
    from ``shapes[name]`` for bare names; scalar if unknown).
    """
    if output.shape != ():
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    order = topo_order([output])

    by_name: dict[str, list[Expr]] = {}
    for node in order:
        if node.op == "input":
            by_name.setdefault(node.attr, []).append(node)
    target_sets = []
    targets: set[int] = set()
    for w in wrt:
        nodes = by_name.get(w, []) if isinstance(w, str) else [w]
        target_sets.append(nodes)
        targets.update(id(n) for n in nodes)

    # only nodes with a target at or below them need adjoints
    relevant: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(c) in relevant for c in node.children):
            relevant.add(id(node))

    adj: dict[int, Expr] = {}
    if id(output) in relevant:
        adj[id(output)] = E.const(1.0)
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or node.op in E.LEAF_OPS or node.op in _ZERO_GRAD:
            continue
        need = [id(c) in relevant for c in node.children]
        if not any(need):
            continue
        for child, cg in zip(node.children, _RULES[node.op](node, g, need)):
            if cg is None or id(child) not in relevant:
                continue
            prev = adj.get(id(child))
            adj[id(child)] = cg if prev is None else E.add(prev, cg)

    shapes = shapes or {}
    out = []
    for w, nodes in zip(wrt, target_sets):
        parts = [adj[id(n)] for n in nodes if id(n) in adj]
        if not parts:
            shape = w.shape if isinstance(w, Expr) else tuple(shapes.get(w, ()))
            out.append(E.zeros(shape))
            continue
        total = parts[0]
        for p in parts[1:]:
            total = E.add(total, p)
        out.append(total)
    return out


def finite_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        res[i] = (fp - fm) / (2.0 * h)
    return out


def max_relative_error(a, b, floor: float = 1e-12) -> float:
    """max|a - b| scaled by the largest magnitude in either array.

    Scaling by the array-wide magnitude keeps near-zero components, where
    central differences carry pure round-off, from dominating.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale
