"""Synthetic-data learning by matching segments of a global-model trajectory.

Starting from checkpoint w^t, a few plain gradient steps on the synthetic
set should land near a (possibly averaged) later checkpoint.  The matching
loss is differentiated through the whole inner unroll with respect to the
synthetic inputs and label logits, and those are updated with Adam.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    DegenerateSegment,
    DegenerateTrajectoryError,
    DivergenceError,
    NumericOverflowError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .model import (
    METRICS,
    DistanceMetric,
    MlpSpec,
    ParamVector,
    UnrollStep,
    distance,
    distance_expr,
    flat_exprs,
    forward_expr,
    param_inputs,
    sgd_unroll,
    soft_ce_expr,
    unroll,
)
from .numerics import expr as E
from .numerics import grad
from .numerics.expr import Program
from .numerics.rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Trajectory:
    checkpoints: tuple
    rounds: tuple

    def __post_init__(self):
        ckpts = tuple(self.checkpoints)
        rounds = tuple(int(r) for r in self.rounds)
        if len(ckpts) != len(rounds) or not ckpts:
            raise ValidationError("trajectory needs one round index per checkpoint")
        if any(b <= a for a, b in zip(rounds, rounds[1:])):
            raise ValidationError("trajectory round indices must be strictly increasing")
        spec = ckpts[0].spec
        if any(c.spec != spec for c in ckpts):
            raise ValidationError("all checkpoints must share one model spec")
        object.__setattr__(self, "checkpoints", ckpts)
        object.__setattr__(self, "rounds", rounds)

    def __len__(self):
        return len(self.checkpoints)

    def __getitem__(self, i) -> ParamVector:
        return self.checkpoints[i]

    @property
    def spec(self) -> MlpSpec:
        return self.checkpoints[0].spec

    @classmethod
    def from_list(cls, checkpoints) -> "Trajectory":
        return cls(tuple(checkpoints), tuple(range(len(checkpoints))))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    X: np.ndarray
    Ylogits: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        Y = np.array(self.Ylogits, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ShapeError(f"X {X.shape} and Ylogits {Y.shape} must both be n-row matrices")
        if not (np.isfinite(X).all() and np.isfinite(Y).all()):
            raise ValidationError("synthetic dataset contains non-finite values")
        if Y.shape[0] < Y.shape[1]:
            warnings.warn(f"only {Y.shape[0]} synthetic samples for {Y.shape[1]} classes", stacklevel=3)
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Ylogits", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.Ylogits.shape[1]

    def targets(self) -> np.ndarray:
        return _softmax_rows(self.Ylogits)


@dataclass(frozen=True)
class SynthConfig:
    s: int = 5
    s_prime: int = 10
    N: int = 1000
    eta_outer: float = 5e-2
    eta_inner: float = 1e-5
    n: int = 150
    target_avg_count: int = 2
    metric: str = "normalized_l2"

    def __post_init__(self):
        if self.s < 1 or self.s_prime < 1 or self.N < 1 or self.n < 1:
            raise ConfigError("need s >= 1, s_prime >= 1, N >= 1, n >= 1")
        if not (self.eta_outer > 0 and self.eta_inner > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.target_avg_count <= self.s - 1:
            raise ConfigError(f"target_avg_count must be in [0, s-1] = [0, {self.s - 1}]")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")

    def check_trajectory(self, traj: Trajectory):
        if len(traj) < self.s + 1:
            raise ConfigError(f"trajectory has {len(traj)} checkpoints; segment span s={self.s} needs {self.s + 1}")


def init_synthetic(n: int, d: int, K: int, rng: Rng) -> SyntheticDataset:
    """Gaussian inputs, all-zero label logits (exactly uniform soft labels)."""
    if min(n, d, K) < 1:
        raise ValidationError("n, d and K must be positive")
    return SyntheticDataset(rng.standard_normal((n, d)), np.zeros((n, K)))


@dataclass(frozen=True, eq=False)
class Segment:
    t: int
    intermediates: tuple
    start: ParamVector
    target: ParamVector


def sample_segment(traj: Trajectory, cfg: SynthConfig, rng: Rng, avg_rng: Rng | None = None) -> Segment:
    """Draw t uniformly over admissible starts and build the matching target.

    The target averages w^{t+s} with ``target_avg_count`` distinct
    checkpoints strictly between t and t+s (drawn from ``avg_rng``).
    """
    if cfg.target_avg_count > cfg.s - 1:
        raise ConfigError("target_avg_count exceeds s - 1")
    cfg.check_trajectory(traj)
    t = int(rng.integers(0, len(traj) - cfg.s))
    picks: tuple = ()
    target = traj[t + cfg.s]
    if cfg.target_avg_count:
        pool = np.arange(t + 1, t + cfg.s)
        picks = tuple(int(i) for i in (avg_rng or rng).choice(pool, size=cfg.target_avg_count, replace=False))
        acc = target.values.copy()
        for i in picks:
            acc += traj[i].values
        target = target.with_values(acc / (len(picks) + 1))
    return Segment(t, picks, traj[t], target)


class MetaGraph:
    """Compiled graph for (matching loss, dL/dX, dL/dYlogits).

    Inputs: ``X`` (n x d), ``Y`` (n x K label logits), ``start.*`` and
    ``target.*`` parameter blocks.  Built once per shape/config and
    re-evaluated with new bindings on every outer iteration.
    """

    def __init__(self, spec: MlpSpec, n: int, s_prime: int, eta_inner: float, metric: str):
        self.spec = spec
        X = E.input("X", (n, spec.input_dim))
        Y = E.input("Y", (n, spec.n_classes))
        T = E.softmax(Y)
        start = flat_exprs(param_inputs(spec, "start"))
        target = flat_exprs(param_inputs(spec, "target"))

        def loss_fn(flat):
            pairs = [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]
            return soft_ce_expr(forward_expr(pairs, X), T)

        w_tilde = unroll(start, loss_fn, eta_inner, s_prime)
        self.loss = distance_expr(w_tilde, target, metric, start=start)
        gX, gY = grad(self.loss, [X, Y])
        self.program = Program([self.loss, gX, gY])

    def __call__(self, X, Ylogits, w_start: ParamVector, w_target: ParamVector):
        bind = {"X": X, "Y": Ylogits}
        bind.update(w_start.bindings("start"))
        bind.update(w_target.bindings("target"))
        try:
            loss, gX, gY = self.program.run(bind)
        except NumericOverflowError as exc:
            if isinstance(exc.node_label, UnrollStep):
                raise DivergenceError(
                    f"inner unroll diverged at step {int(exc.node_label)}", step=int(exc.node_label)
                ) from exc
            raise
        return float(loss), gX, gY


_GRAPH_CACHE: dict = {}


def meta_graph(spec: MlpSpec, n: int, cfg: SynthConfig) -> MetaGraph:
    key = (spec.layer_sizes, n, cfg.s_prime, cfg.eta_inner, cfg.metric)
    g = _GRAPH_CACHE.get(key)
    if g is None:
        if len(_GRAPH_CACHE) > 16:
            _GRAPH_CACHE.clear()
        g = _GRAPH_CACHE[key] = MetaGraph(spec, n, cfg.s_prime, cfg.eta_inner, cfg.metric)
    return g


def _check_segment(w_start: ParamVector, w_target: ParamVector, metric: str):
    if w_start.spec != w_target.spec:
        raise ShapeError("segment endpoints come from different specs")
    if metric == "normalized_l2" and np.array_equal(w_start.values, w_target.values):
        raise DegenerateSegment("w_start equals w_target")
    if metric == "cosine" and not np.any(w_target.values):
        raise UndefinedMetricError("cosine distance to a zero target vector")


def meta_loss_and_grads(dsyn: SyntheticDataset, w_start: ParamVector, w_target: ParamVector,
                        cfg: SynthConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Matching loss d(w~, w_target) and its exact gradients w.r.t. X and Ylogits."""
    spec = w_start.spec
    if dsyn.d != spec.input_dim or dsyn.K != spec.n_classes:
        raise ShapeError(f"synthetic data (d={dsyn.d}, K={dsyn.K}) does not fit spec {spec.layer_sizes}")
    _check_segment(w_start, w_target, cfg.metric)
    return meta_graph(spec, dsyn.n, cfg)(dsyn.X, dsyn.Ylogits, w_start, w_target)


@dataclass
class SynthResult:
    dataset: SyntheticDataset
    log: list = field(default_factory=list)  # (iteration, segment_t, loss)
    skipped: int = 0

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[2] for row in self.log])

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "segment_t", "loss"])
            for it, t, loss in self.log:
                w.writerow([it, t, repr(loss)])


def datasyn(traj: Trajectory, cfg: SynthConfig, rng: Rng, init: SyntheticDataset | None = None) -> SynthResult:
    """Learn a synthetic dataset from a trajectory; N outer Adam iterations."""
    cfg.check_trajectory(traj)
    spec = traj.spec
    dsyn = init or init_synthetic(cfg.n, spec.input_dim, spec.n_classes, rng.split("init"))
    seg_rng, avg_rng = rng.split("segment"), rng.split("average")
    graph = meta_graph(spec, dsyn.n, cfg)

    X = dsyn.X.copy()
    Y = dsyn.Ylogits.copy()
    xf, yf = X.reshape(-1), Y.reshape(-1)
    mX, vX = np.zeros_like(xf), np.zeros_like(xf)
    mY, vY = np.zeros_like(yf), np.zeros_like(yf)
    result = SynthResult(dsyn)
    for it in range(cfg.N):
        while True:
            seg = sample_segment(traj, cfg, seg_rng, avg_rng)
            try:
                _check_segment(seg.start, seg.target, cfg.metric)
                break
            except DegenerateSegment:
                result.skipped += 1
                if result.skipped > cfg.N:
                    raise DegenerateTrajectoryError(
                        f"more than half of the sampled segments were degenerate ({result.skipped} skipped)"
                    ) from None
        loss, gX, gY = graph(X, Y, seg.start, seg.target)
        kernels.adam_step(xf, np.ascontiguousarray(gX).reshape(-1), mX, vX, it + 1, cfg.eta_outer, 0.9, 0.999, 1e-8)
        kernels.adam_step(yf, np.ascontiguousarray(gY).reshape(-1), mY, vY, it + 1, cfg.eta_outer, 0.9, 0.999, 1e-8)
        result.log.append((it, seg.t, loss))
        if it % 100 == 0:
            log.debug("datasyn iteration %d  t=%d  loss=%.6g", it, seg.t, loss)
    result.dataset = SyntheticDataset(X, Y)
    return result


# ----------------------------------------------------------------- fidelity

@dataclass
class FidelityRow:
    name: str
    mean: float
    per_segment: list


def _candidate_arrays(c):
    if isinstance(c, SyntheticDataset):
        return c.X, c.targets()
    X, T = c
    return np.asarray(X, dtype=np.float64), np.asarray(T, dtype=np.float64)


def trajectory_fidelity(traj: Trajectory, cfg: SynthConfig, candidates: Mapping[str, object]) -> list[FidelityRow]:
    """Per-segment d(w~, w^{t+s}) after s' inner steps on each candidate.

    Candidates are SyntheticDatasets or (X, soft-target) pairs.  Segments
    with w^t == w^{t+s} are left out under normalized_l2.
    """
    cfg.check_trajectory(traj)
    arrays = {name: _candidate_arrays(c) for name, c in candidates.items()}
    shapes = {(X.shape[1], T.shape[1]) for X, T in arrays.values()}
    if len(shapes) > 1:
        raise ShapeError("fidelity candidates must share input dim and class count")
    rows = {name: [] for name in arrays}
    for t in range(len(traj) - cfg.s):
        start, target = traj[t], traj[t + cfg.s]
        try:
            metric = DistanceMetric(cfg.metric, (start, target) if cfg.metric == "normalized_l2" else None)
        except DegenerateSegment:
            continue
        for name, (X, T) in arrays.items():
            w = sgd_unroll(start, X, T, cfg.eta_inner, cfg.s_prime)
            rows[name].append(distance(w, target, metric))
    return [FidelityRow(name, float(np.mean(v)) if v else float("nan"), v) for name, v in rows.items()]


def noise_candidate(n: int, d: int, K: int, rng: Rng):
    """Gaussian inputs with uniform soft labels: no training signal."""
    return rng.standard_normal((n, d)), np.full((n, K), 1.0 / K)


def real_subset_candidate(X, labels, K: int, n: int, rng: Rng):
    idx = rng.choice(len(labels), size=min(n, len(labels)), replace=False)
    T = np.zeros((idx.size, K))
    T[np.arange(idx.size), np.asarray(labels)[idx]] = 1.0
    return np.asarray(X)[idx], T
