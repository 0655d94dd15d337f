"""FedAvg, FedProx and DynaFed round loops."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DivergenceError, ValidationError
from .federation import (
    LabeledDataset,
    OptimizerConfig,
    Partition,
    aggregate,
    evaluate,
    local_train,
    per_client_losses,
    round_plan,
)
from .model import MlpSpec, ParamVector, init_params
from .numerics.rng import Rng
from .synthesis import SynthConfig, SynthResult, SyntheticDataset, Trajectory, datasyn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 100
    lr: float = 1e-2
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.steps < 0 or not self.lr > 0 or self.optimizer not in ("sgd", "adam"):
            raise ConfigError("finetune needs steps >= 0, lr > 0, optimizer in {sgd, adam}")


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 200
    clients: int = 80
    ratio: float = 0.4
    local_epochs: int = 1
    local_opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    L: int = 20
    synth: SynthConfig = field(default_factory=SynthConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    aggregation: str = "weighted"
    hidden: tuple = (128,)
    seed: int = 0
    track_client_losses: bool = False

    def __post_init__(self):
        if self.rounds < 1 or self.clients < 1 or self.local_epochs < 1:
            raise ConfigError("rounds, clients and local_epochs must be >= 1")
        if not 0 < self.ratio <= 1:
            raise ConfigError("participation ratio must be in (0, 1]")
        if not 1 <= self.L < self.rounds:
            raise ConfigError("trajectory length L must satisfy 1 <= L < rounds")
        if self.aggregation not in ("weighted", "uniform"):
            raise ConfigError(f"unknown aggregation mode {self.aggregation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def model_spec(self, d: int, K: int) -> MlpSpec:
        return MlpSpec((d, *self.hidden, K))


@dataclass
class RoundMetrics:
    round: int
    phase: str
    test_loss: float
    test_acc: float
    pre_ft_acc: float
    post_ft_acc: float
    wall_ms: float
    pre_ft_loss: float = float("nan")
    client_losses_pre: np.ndarray | None = None
    client_losses_post: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.test_acc <= 1.0:
            raise ValidationError("accuracy must lie in [0, 1]")


CSV_HEADER = ("round", "phase", "test_loss", "test_acc", "pre_ft_acc", "post_ft_acc", "wall_ms")


@dataclass
class RunResult:
    algo: str
    metrics: list
    trajectory: Trajectory
    final: ParamVector
    synth: SynthResult | None = None

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([m.test_acc for m in self.metrics])

    @property
    def dsyn(self) -> SyntheticDataset | None:
        return self.synth.dataset if self.synth else None


def finetune(w: ParamVector, dsyn: SyntheticDataset, ft: FinetuneConfig) -> ParamVector:
    """Full-batch steps on the synthetic set's soft labels."""
    if dsyn.n < 1:
        raise ValidationError("synthetic dataset is empty")
    params = w.values.copy()
    if ft.steps == 0:
        return ParamVector(w.spec, params)
    T = dsyn.targets()
    g = np.empty_like(params)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    for k in range(ft.steps):
        kernels.mlp_loss_grad(params, w.spec.sizes_array, dsyn.X, T, g)
        if ft.optimizer == "adam":
            kernels.adam_step(params, g, m, v, k + 1, ft.lr, 0.9, 0.999, 1e-8)
        else:
            params -= ft.lr * g
        if not np.isfinite(params).all():
            raise DivergenceError(f"finetune diverged at step {k}", step=k)
    return ParamVector(w.spec, params)


def _rounds(cfg: RunConfig, data: LabeledDataset, partition: Partition, test: LabeledDataset,
            algo: str, mu_prox: float = 0.0, synth_fn=None):
    if partition.n_total != data.n:
        raise ValidationError("partition does not match the training data")
    if partition.M != cfg.clients:
        raise ValidationError(f"partition has {partition.M} clients, config says {cfg.clients}")
    root = Rng(cfg.seed)
    spec = cfg.model_spec(data.d, data.K)
    w = init_params(spec, root.split("init"))
    shards = [partition.shard(data, m) for m in range(partition.M)]
    checkpoints = [w]
    metrics = []
    synth_result = None
    dynafed = algo == "dynafed"
    for c in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        plan = round_plan(c, partition, cfg.ratio, root.split("sample", c))
        # ascending client order keeps aggregation bit-reproducible
        local = [
            local_train(w, shards[m], cfg.local_epochs, cfg.local_opt, root.split("local", c, m), mu_prox)
            for m in plan.active
        ]
        w = aggregate(local, partition.weights[list(plan.active)], cfg.aggregation)
        pre_loss, pre_acc = evaluate(w, test)
        pre_clients = per_client_losses(w, partition, data) if cfg.track_client_losses else None
        post_acc, post_loss, post_clients = pre_acc, pre_loss, pre_clients
        phase = algo
        if dynafed:
            if c < cfg.L:
                phase = "collect"
                checkpoints.append(w)
            elif c == cfg.L:
                phase = "synth"
                checkpoints.append(w)
                synth_result = synth_fn(Trajectory.from_list(checkpoints), cfg.synth, root.split("synth"))
            else:
                phase = "finetune"
                w = finetune(w, synth_result.dataset, cfg.finetune)
                post_loss, post_acc = evaluate(w, test)
                if cfg.track_client_losses:
                    post_clients = per_client_losses(w, partition, data)
        else:
            checkpoints.append(w)
        metrics.append(
            RoundMetrics(
                round=c,
                phase=phase,
                test_loss=post_loss,
                test_acc=post_acc,
                pre_ft_acc=pre_acc,
                post_ft_acc=post_acc,
                wall_ms=(time.perf_counter() - t0) * 1e3,
                pre_ft_loss=pre_loss,
                client_losses_pre=pre_clients,
                client_losses_post=post_clients,
            )
        )
        log.debug("%s round %d  acc %.4f (pre %.4f)", algo, c, post_acc, pre_acc)
    return RunResult(algo, metrics, Trajectory.from_list(checkpoints), w, synth_result)


def run_fedavg(cfg: RunConfig, data: LabeledDataset, partition: Partition, test: LabeledDataset) -> RunResult:
    """Trajectory covers the initialization plus every aggregated model."""
    return _rounds(cfg, data, partition, test, "fedavg")


def run_fedprox(cfg: RunConfig, data, partition, test, mu_prox: float) -> RunResult:
    return _rounds(cfg, data, partition, test, "fedprox", mu_prox=mu_prox)


def run_dynafed(cfg: RunConfig, data, partition, test, synth_fn=datasyn) -> RunResult:
    """Collect w^0..w^L, synthesize once at round L, finetune every later round.

    The returned trajectory is the L+1 checkpoints used for synthesis.
    ``synth_fn`` is injectable for call-count probes.
    """
    return _rounds(cfg, data, partition, test, "dynafed", synth_fn=synth_fn)
