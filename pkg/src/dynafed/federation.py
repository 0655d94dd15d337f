"""Client partitioning, local training, aggregation and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .errors import DivergenceError, InfeasiblePartitionError, ShapeError, ValidationError
from .model import ParamVector, one_hot
from .numerics.rng import Rng


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    X: np.ndarray
    labels: np.ndarray
    K: int

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != labels.size:
            raise ShapeError(f"X has shape {X.shape} but there are {labels.size} labels")
        if labels.size < 1:
            raise ValidationError("dataset must contain at least one sample")
        if labels.min() < 0 or labels.max() >= self.K:
            raise ValidationError(f"labels must lie in [0, {self.K})")
        X.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "K", int(self.K))

    def __len__(self):
        return self.labels.size

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @cached_property
    def targets(self) -> np.ndarray:
        t = one_hot(self.labels, self.K)
        t.setflags(write=False)
        return t

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.labels[idx], self.K)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)


@dataclass(frozen=True, eq=False)
class Partition:
    client_indices: tuple
    n_total: int
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        lists = tuple(np.sort(np.asarray(ix, dtype=np.int64)) for ix in self.client_indices)
        if not lists:
            raise ValidationError("partition needs at least one client")
        if any(ix.size == 0 for ix in lists):
            raise ValidationError("every client must own at least one sample")
        allidx = np.concatenate(lists)
        if allidx.size != self.n_total or not np.array_equal(np.sort(allidx), np.arange(self.n_total)):
            raise ValidationError("client index lists must be disjoint and cover every sample")
        for ix in lists:
            ix.setflags(write=False)
        object.__setattr__(self, "client_indices", lists)
        w = np.array([ix.size for ix in lists], dtype=np.float64) / self.n_total
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def M(self) -> int:
        return len(self.client_indices)

    def shard(self, data: LabeledDataset, m: int) -> LabeledDataset:
        return data.subset(self.client_indices[m])

    def stats(self, labels, K: int) -> dict:
        labels = np.asarray(labels)
        hists = [np.bincount(labels[ix], minlength=K).tolist() for ix in self.client_indices]
        return {
            "clients": self.M,
            "n_total": self.n_total,
            "sizes": [int(ix.size) for ix in self.client_indices],
            "weights": self.weights.tolist(),
            "class_histograms": hists,
            "mean_label_entropy": float(np.mean([_entropy(h) for h in hists])),
        }


def _entropy(hist) -> float:
    p = np.asarray(hist, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class RoundPlan:
    round: int
    active: tuple
    P: float


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: ties go to the lower client index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, M: int, alpha: float, rng: Rng, K: int | None = None) -> Partition:
    """Per-class Dirichlet(alpha) allocation of samples to M clients.

    Clients left empty take one sample from the currently largest client.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if M < 1 or not alpha > 0:
        raise ValidationError("need M >= 1 and alpha > 0")
    if M > n:
        raise InfeasiblePartitionError(f"cannot give {M} clients a sample each from {n} samples")
    K = int(labels.max()) + 1 if K is None else K
    buckets: list[list[int]] = [[] for _ in range(M)]
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        p = rng.dirichlet(np.full(M, float(alpha)))
        counts = _largest_remainder(p, idx.size)
        start = 0
        for m in range(M):
            buckets[m].extend(idx[start:start + counts[m]].tolist())
            start += counts[m]
    for m in range(M):
        if not buckets[m]:
            donor = max(range(M), key=lambda j: (len(buckets[j]), -j))
            buckets[m].append(buckets[donor].pop())
    return Partition(tuple(buckets), n)


def iid_partition(n: int, M: int, rng: Rng) -> Partition:
    if M > n:
        raise InfeasiblePartitionError(f"cannot give {M} clients a sample each from {n} samples")
    perm = rng.permutation(n)
    return Partition(tuple(np.array_split(perm, M)), n)


def n_active(M: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValidationError("participation ratio must be in (0, 1]")
    return max(1, int(np.floor(ratio * M + 0.5)))


def sample_clients(M: int, ratio: float, rng: Rng) -> np.ndarray:
    """Uniform draw without replacement, returned in ascending order."""
    k = n_active(M, ratio)
    return np.sort(rng.choice(M, size=k, replace=False))


def round_plan(c: int, partition: Partition, ratio: float, rng: Rng) -> RoundPlan:
    active = sample_clients(partition.M, ratio, rng)
    return RoundPlan(c, tuple(int(a) for a in active), float(partition.weights[active].sum()))


# ----------------------------------------------------------- local training

@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.name!r}")
        if not self.lr > 0 or self.batch_size < 1:
            raise ValidationError("optimizer needs lr > 0 and batch_size >= 1")


def local_train(w: ParamVector, shard: LabeledDataset, epochs: int, opt: OptimizerConfig,
                rng: Rng, mu_prox: float = 0.0) -> ParamVector:
    """Minibatch training on one client's shard from a fresh optimizer state.

    ``mu_prox > 0`` adds the proximal term (mu/2)||w - w_start||^2.
    """
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    if mu_prox < 0:
        raise ValidationError("mu_prox must be non-negative")
    sizes = w.spec.sizes_array
    params = w.values.copy()
    anchor = w.values
    g = np.empty_like(params)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    X, T = shard.X, shard.targets
    n = shard.n
    bs = opt.batch_size
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            kernels.mlp_loss_grad(params, sizes, X[idx], T[idx], g)
            if mu_prox > 0:
                g += mu_prox * (params - anchor)
            t += 1
            if opt.name == "adam":
                kernels.adam_step(params, g, m, v, t, opt.lr, opt.beta1, opt.beta2, opt.eps)
            else:
                params -= opt.lr * g
            if not np.isfinite(params).all():
                raise DivergenceError(
                    f"non-finite parameters at epoch {epoch}, batch {b}", step=t, epoch=epoch, batch=b
                )
    return ParamVector(w.spec, params)


def fedprox_local_train(w, shard, epochs, opt, rng, mu_prox: float) -> ParamVector:
    return local_train(w, shard, epochs, opt, rng, mu_prox=mu_prox)


def prox_penalty(w: np.ndarray, anchor: np.ndarray, mu_prox: float) -> float:
    d = np.asarray(w) - np.asarray(anchor)
    return 0.5 * mu_prox * float(np.dot(d, d))


def prox_gradient(w: np.ndarray, anchor: np.ndarray, mu_prox: float) -> np.ndarray:
    return mu_prox * (np.asarray(w) - np.asarray(anchor))


# ------------------------------------------------------------- aggregation

def aggregate(params_list, weights=None, mode: str = "weighted") -> ParamVector:
    """Convex combination of parameter vectors.

    ``weighted`` normalizes ``weights`` (the alpha_m of the active clients)
    to sum to one; ``uniform`` ignores them.  Computed as
    w_0 + sum_i c_i (w_i - w_0), which is exact when all inputs agree.
    """
    params_list = list(params_list)
    if not params_list:
        raise ValidationError("nothing to aggregate")
    spec = params_list[0].spec
    if any(p.spec != spec for p in params_list):
        raise ValidationError("cannot aggregate parameter vectors of different specs")
    k = len(params_list)
    if mode == "uniform":
        coef = np.full(k, 1.0 / k)
    elif mode == "weighted":
        if weights is None or len(weights) != k:
            raise ValidationError("weighted aggregation needs one weight per vector")
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights < 0) or not weights.sum() > 0:
            raise ValidationError("weights must be non-negative with a positive sum")
        coef = weights / weights.sum()
    else:
        raise ValidationError(f"unknown aggregation mode {mode!r}")
    base = params_list[0].values
    out = base.copy()
    for c, p in zip(coef[1:], params_list[1:]):
        out += c * (p.values - base)
    return ParamVector(spec, out)


# --------------------------------------------------------------- evaluation

def per_sample_losses(w: ParamVector, data: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    z = kernels.mlp_logits(w.values, w.spec.sizes_array, data.X)
    mx = z.max(axis=1, keepdims=True)
    lse = (mx + np.log(np.exp(z - mx).sum(axis=1, keepdims=True)))[:, 0]
    losses = lse - z[np.arange(data.n), data.labels]
    return losses, z


def evaluate(w: ParamVector, data: LabeledDataset) -> tuple[float, float]:
    """(mean cross-entropy, accuracy); argmax ties go to the lowest class."""
    losses, z = per_sample_losses(w, data)
    acc = float(np.mean(np.argmax(z, axis=1) == data.labels))
    return float(losses.mean()), acc


def per_client_losses(w: ParamVector, partition: Partition, data: LabeledDataset) -> np.ndarray:
    losses, _ = per_sample_losses(w, data)
    return np.array([losses[ix].mean() for ix in partition.client_indices])
