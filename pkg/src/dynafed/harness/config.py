"""YAML experiment configuration with a strict schema.

Every section maps onto a dataclass; unknown keys and wrongly typed values
raise ConfigError before anything runs.  Omitted keys take the defaults
below.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import ConfigError, ValidationError
from ..federation import OptimizerConfig
from ..orchestration import FinetuneConfig, RunConfig
from ..synthesis import SynthConfig
from .data import BlobsSpec


@dataclass(frozen=True)
class BlobsSection:
    K: int = 5
    d: int = 2
    per_class: int = 200
    radius: float = 4.0
    std: float = 0.5
    test_per_class: int = 200

    def spec(self) -> BlobsSpec:
        return BlobsSpec(self.K, self.d, self.per_class, self.radius, self.std)


@dataclass(frozen=True)
class IdxSection:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class TaskSection:
    kind: str = "blobs"
    blobs: BlobsSection = field(default_factory=BlobsSection)
    idx: IdxSection = field(default_factory=IdxSection)

    def __post_init__(self):
        if self.kind not in ("blobs", "idx"):
            raise ConfigError(f"task.kind must be 'blobs' or 'idx', got {self.kind!r}")


@dataclass(frozen=True)
class PartitionSection:
    kind: str = "dirichlet"
    alpha: float = 0.05

    def __post_init__(self):
        if self.kind not in ("dirichlet", "iid"):
            raise ConfigError(f"partition.kind must be 'dirichlet' or 'iid', got {self.kind!r}")
        if not self.alpha > 0:
            raise ConfigError("partition.alpha must be positive")


@dataclass(frozen=True)
class RunSection:
    rounds: int = 200
    clients: int = 80
    ratio: float = 0.4
    local_epochs: int = 1
    L: int = 20
    aggregation: str = "weighted"
    hidden: tuple = (128,)
    mu_prox: float = 0.01
    track_client_losses: bool = False


@dataclass(frozen=True)
class TheorySection:
    d: int = 20
    cond: float = 50.0
    clients: int = 4
    samples: int = 20
    noise: float = 1.0
    hetero: float = 0.2
    delta: float = 0.005
    epsilon: float = 0.0
    c: float = 4.0
    gamma: float = 200.0
    tau1: int = 5
    tau2: int = 2
    T: int = 10_000
    seeds: int = 5
    probes: int = 40
    window: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    task: TaskSection = field(default_factory=TaskSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    run: RunSection = field(default_factory=RunSection)
    local_opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    theory: TheorySection = field(default_factory=TheorySection)

    def run_config(self) -> RunConfig:
        r = self.run
        return RunConfig(
            rounds=r.rounds,
            clients=r.clients,
            ratio=r.ratio,
            local_epochs=r.local_epochs,
            local_opt=self.local_opt,
            L=r.L,
            synth=self.synth,
            finetune=self.finetune,
            aggregation=r.aggregation,
            hidden=r.hidden,
            seed=self.seed,
            track_client_losses=r.track_client_losses,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))


def _check_type(value, default, where: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def build(cls, data, where: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested sections."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        path = ", ".join(f"{where}.{k}" if where else str(k) for k in unknown)
        raise ConfigError(f"unknown config key(s): {path}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{where}.{name}" if where else name
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = build(type(default), value, sub)
        else:
            kwargs[name] = _check_type(value, default, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    """Read a YAML file (or use all defaults when ``path`` is None)."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    cfg = build(ExperimentConfig, data)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, tuple):
        return [_asdict(v) for v in obj]
    return obj


def to_dict(cfg) -> dict:
    return _asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(_asdict(cfg), sort_keys=False)
