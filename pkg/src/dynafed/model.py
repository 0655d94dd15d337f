"""Relu MLPs, soft-target cross-entropy, the unrolled SGD trainer and
parameter-space distances."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import (
    DegenerateSegment,
    DivergenceError,
    NumericOverflowError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .numerics import expr as E
from .numerics import grad, label_scope
from .numerics.expr import Expr, Program
from .numerics.rng import Rng


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(d, hidden..., K)``; relu between layers, linear head."""

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValidationError(f"invalid layer sizes {self.layer_sizes!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def layer_shapes(self):
        return [((i, o), (o,)) for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @cached_property
    def sizes_array(self) -> np.ndarray:
        return kernels.sizes_array(self.layer_sizes)


@dataclass(frozen=True, eq=False)
class ParamVector:
    spec: MlpSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        if vals.size != self.spec.n_params:
            raise ShapeError(
                f"parameter vector has {vals.size} values, spec {self.spec.layer_sizes} "
                f"needs {self.spec.n_params}"
            )
        if not np.isfinite(vals).all():
            raise NumericOverflowError("parameter vector contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        off = 0
        for (wshape, bshape) in self.spec.layer_shapes:
            nw = wshape[0] * wshape[1]
            out.append(
                (
                    self.values[off:off + nw].reshape(wshape),
                    self.values[off + nw:off + nw + bshape[0]],
                )
            )
            off += nw + bshape[0]
        return out

    @classmethod
    def from_layers(cls, spec: MlpSpec, layers) -> "ParamVector":
        flat = []
        for W, b in layers:
            flat.append(np.asarray(W, dtype=np.float64).reshape(-1))
            flat.append(np.asarray(b, dtype=np.float64).reshape(-1))
        return cls(spec, np.concatenate(flat))

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.spec, values)

    def bindings(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for l, (W, b) in enumerate(self.layers()):
            out[f"{prefix}.W{l}"] = W
            out[f"{prefix}.b{l}"] = b
        return out


def init_params(spec: MlpSpec, rng: Rng) -> ParamVector:
    """He init: W ~ N(0, 2/fan_in), b = 0."""
    layers = []
    for (wshape, bshape) in spec.layer_shapes:
        W = rng.normal(0.0, np.sqrt(2.0 / wshape[0]), size=wshape)
        layers.append((W, np.zeros(bshape)))
    return ParamVector.from_layers(spec, layers)


# ------------------------------------------------------------ graph side

Layers = list  # list of (W, b) expression pairs


def param_inputs(spec: MlpSpec, prefix: str) -> Layers:
    return [
        (E.input(f"{prefix}.W{l}", ws), E.input(f"{prefix}.b{l}", bs))
        for l, (ws, bs) in enumerate(spec.layer_shapes)
    ]


def param_consts(params: ParamVector) -> Layers:
    return [(E.const(W), E.const(b)) for W, b in params.layers()]


def flat_exprs(layers: Layers) -> list[Expr]:
    return [p for pair in layers for p in pair]


def forward_expr(layers: Layers, X) -> Expr:
    A = E.as_expr(X)
    for l, (W, b) in enumerate(layers):
        A = E.matmul(A, W) + b
        if l < len(layers) - 1:
            A = E.relu(A)
    return A


def soft_ce_expr(logits: Expr, target) -> Expr:
    """(1/n) * sum_i -sum_k t_ik log_softmax(z_i)_k"""
    n = logits.shape[0]
    return E.scale(E.sum(E.mul(target, E.log_softmax(logits))), -1.0 / n)


def check_targets(target: np.ndarray, n_classes: int | None = None, tol: float = 1e-8):
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 2:
        raise ShapeError(f"targets must be n x K, got shape {target.shape}")
    if n_classes is not None and target.shape[1] != n_classes:
        raise ShapeError(f"targets have {target.shape[1]} classes, model has {n_classes}")
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=1) - 1.0) > tol):
        raise ValidationError("target rows must be probability distributions")
    return target


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, K))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss(params, X, target) -> Expr:
    """Scalar loss expression.

    ``params`` is a ParamVector (embedded as constants) or a list of (W, b)
    expression pairs; ``X``/``target`` may be arrays or expressions.
    """
    if isinstance(params, ParamVector):
        spec = params.spec
        layers = param_consts(params)
    else:
        spec = None
        layers = params
    if not isinstance(target, Expr):
        target = check_targets(target, spec.n_classes if spec else None)
    if not isinstance(X, Expr):
        X = np.asarray(X, dtype=np.float64)
    return soft_ce_expr(forward_expr(layers, X), target)


def loss_value(params: ParamVector, X, target) -> float:
    """Same quantity as :func:`loss`, computed by the fused kernel."""
    g = np.empty(params.spec.n_params)
    return kernels.mlp_loss_grad(params.values, params.spec.sizes_array, X, target, g)


def loss_and_grad(params: ParamVector, X, target) -> tuple[float, np.ndarray]:
    g = np.empty(params.spec.n_params)
    val = kernels.mlp_loss_grad(params.values, params.spec.sizes_array, X, target, g)
    return val, g


def logits(params: ParamVector, X) -> np.ndarray:
    return kernels.mlp_logits(params.values, params.spec.sizes_array, X)


# ------------------------------------------------------------- unrolling

class UnrollStep(int):
    """Node label carrying the unroll step that created the node."""

    def __str__(self):
        return f"unroll step {int(self)}"


def sgd_step_expr(flat: Sequence[Expr], loss_fn: Callable[[Sequence[Expr]], Expr], lr: float):
    """One plain gradient-descent step as graph nodes."""
    L = loss_fn(flat)
    grads = grad(L, list(flat))
    return [E.sub(p, E.scale(g, lr)) for p, g in zip(flat, grads)]


def unroll(flat: Sequence[Expr], loss_fn, lr: float, steps: int) -> list[Expr]:
    """``steps`` chained gradient steps; result stays differentiable."""
    if steps < 0 or not lr > 0:
        raise ValidationError("need steps >= 0 and lr > 0")
    cur = list(flat)
    for k in range(steps):
        with label_scope(UnrollStep(k)):
            cur = sgd_step_expr(cur, loss_fn, lr)
    return cur


def unroll_values(values: Sequence[np.ndarray], loss_fn, lr: float, steps: int, extra=None):
    """Numeric twin of :func:`unroll`: evaluates the same one-step graph
    ``steps`` times, so results agree bit-for-bit with the symbolic path."""
    if steps < 0 or not lr > 0:
        raise ValidationError("need steps >= 0 and lr > 0")
    cur = [np.asarray(v, dtype=np.float64) for v in values]
    if steps == 0:
        return cur
    names = [f"__p{i}" for i in range(len(cur))]
    inputs = [E.input(nm, v.shape) for nm, v in zip(names, cur)]
    prog = Program(sgd_step_expr(inputs, loss_fn, lr))
    bind = dict(extra or {})
    for k in range(steps):
        bind.update(zip(names, cur))
        try:
            cur = prog.run(bind)
        except NumericOverflowError as exc:
            raise DivergenceError(f"non-finite parameters at unroll step {k}", step=k) from exc
    return cur


def _pairs(flat):
    return [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]


def sgd_unroll(params: ParamVector, X, target, lr: float, steps: int, differentiable: bool = False):
    """Full-batch gradient descent on the soft-target loss.

    With ``differentiable=True`` returns a list of (W, b) expressions in
    which ``X`` and ``target`` (arrays become constants) remain graph
    nodes; otherwise a new ParamVector.
    """
    if not isinstance(target, Expr):
        target = check_targets(target, params.spec.n_classes)
    if differentiable:
        def loss_fn(flat):
            return soft_ce_expr(forward_expr(_pairs(flat), X), target)

        return _pairs(unroll(flat_exprs(param_consts(params)), loss_fn, lr, steps))

    X = np.asarray(X, dtype=np.float64)
    Xe = E.input("__X", X.shape)
    Te = E.input("__T", target.shape)

    def loss_fn(flat):
        return soft_ce_expr(forward_expr(_pairs(flat), Xe), Te)

    flat = [a for pair in params.layers() for a in pair]
    out = unroll_values(flat, loss_fn, lr, steps, extra={"__X": X, "__T": target})
    return ParamVector.from_layers(params.spec, _pairs(out))


# -------------------------------------------------------------- distances

METRICS = ("normalized_l2", "cosine", "l2")


@dataclass(frozen=True, eq=False)
class DistanceMetric:
    kind: str = "normalized_l2"
    reference: tuple | None = None  # (w_start, w_target) for normalized_l2

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ValidationError(f"unknown distance metric {self.kind!r}")
        if self.kind == "normalized_l2":
            if self.reference is None:
                raise ValidationError("normalized_l2 needs a (w_start, w_target) reference pair")
            if self.normalizer == 0.0:
                raise DegenerateSegment("reference pair is identical; normalizer is zero")

    @property
    def normalizer(self) -> float:
        start, target = self.reference
        diff = _vals(start) - _vals(target)
        return float(np.dot(diff, diff))


def _vals(p):
    return p.values if isinstance(p, ParamVector) else np.asarray(p, dtype=np.float64).reshape(-1)


def distance(a, b, metric: DistanceMetric | str) -> float:
    if isinstance(metric, str):
        metric = DistanceMetric(metric)
    if isinstance(a, ParamVector) and isinstance(b, ParamVector) and a.spec != b.spec:
        raise ShapeError("parameter vectors come from different specs")
    va, vb = _vals(a), _vals(b)
    if metric.kind == "cosine":
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0.0 or nb == 0.0:
            raise UndefinedMetricError("cosine distance with a zero vector")
        return float(1.0 - np.dot(va, vb) / (na * nb))
    diff = va - vb
    sq = float(np.dot(diff, diff))
    if metric.kind == "l2":
        return sq
    return sq / metric.normalizer


def _sumsq_layers(flat: Sequence[Expr]) -> Expr:
    total = None
    for p in flat:
        term = E.sumsq(p)
        total = term if total is None else E.add(total, term)
    return total


def _dot_layers(fa, fb) -> Expr:
    total = None
    for p, q in zip(fa, fb):
        term = E.dot(p, q)
        total = term if total is None else E.add(total, term)
    return total


def distance_expr(a: Sequence[Expr], b: Sequence[Expr], kind: str, start: Sequence[Expr] | None = None) -> Expr:
    """Graph version of :func:`distance` over flat lists of parameter nodes.

    For normalized_l2 the normalizer is built from ``start`` and ``b``.
    """
    if kind == "cosine":
        num = _dot_layers(a, b)
        return E.sub(1.0, E.div(num, E.mul(E.sqrt(_sumsq_layers(a)), E.sqrt(_sumsq_layers(b)))))
    sq = _sumsq_layers([E.sub(p, q) for p, q in zip(a, b)])
    if kind == "l2":
        return sq
    if kind == "normalized_l2":
        if start is None:
            raise ValidationError("normalized_l2 needs the segment start parameters")
        return E.div(sq, _sumsq_layers([E.sub(p, q) for p, q in zip(start, b)]))
    raise ValidationError(f"unknown distance metric {kind!r}")
