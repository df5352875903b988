"""Experiment configuration: a single JSON document with strictly checked keys."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .distill import METHODS, DistillConfig
from .errors import ConfigError, RejectedParameterError
from .nn import OptimizerState
from .rl import PAPER_GRAVITIES, SOURCE_GRAVITY, DQNHyper
from .synthdata import BenchmarkSpec

KINDS = ("classification", "rl", "diagnose", "bench")


def _strict(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, RejectedParameterError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class OptimizerSettings:
    kind: str = "sgd"
    lr: float = 0.05
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    batch_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise RejectedParameterError("batch_size must be positive")
        self.state(1)

    def state(self, epochs: int) -> OptimizerState:
        return OptimizerState(self.kind, self.lr, self.weight_decay, self.schedule, max(epochs, 1))


@dataclass
class RLSettings:
    episodes: int = 2000
    batch: int = 10
    lr: float = 1e-4
    gamma: float = 0.9
    epsilon: float = 0.05
    sync_every: int = 10
    capacity: int = 500
    hidden: int = 64
    train_max_steps: int = 1000
    max_steps: int = 1000
    eval_episodes: int = 10
    source_gravity: float = SOURCE_GRAVITY
    gravities: list = field(default_factory=lambda: list(PAPER_GRAVITIES))

    def __post_init__(self):
        self.hyper()
        if self.max_steps < 1 or self.eval_episodes < 1:
            raise RejectedParameterError("max_steps and eval_episodes must be positive")
        if not self.gravities:
            raise RejectedParameterError("gravities must not be empty")

    def hyper(self) -> DQNHyper:
        return DQNHyper(self.episodes, self.batch, self.lr, self.gamma, self.epsilon,
                        self.sync_every, self.capacity, self.hidden, self.train_max_steps)


@dataclass
class BenchSettings:
    iterations: int = 200
    warmup: int = 50
    repeats: int = 20
    batch_size: int = 64
    methods: list = field(default_factory=lambda: ["deepall", "kddg"])

    def __post_init__(self):
        if self.iterations < 200 or self.repeats < 1 or self.warmup < 0:
            raise RejectedParameterError("bench needs at least 200 timed iterations and one repeat")
        bad = set(self.methods) - {"deepall", "kddg"}
        if bad or not self.methods:
            raise RejectedParameterError(f"bench methods must be drawn from deepall/kddg, got {self.methods}")


@dataclass
class DiagnoseSettings:
    snapshot_dir: str | None = None
    feature_csv: str | None = None
    folds: int = 5
    checkpoint: str | None = None
    data_csv: str | None = None
    edges: list = field(default_factory=lambda: [0.0, 0.5, 0.9, 0.99, 0.999, 1.0])

    def __post_init__(self):
        if self.folds < 2:
            raise RejectedParameterError("folds must be at least 2")


@dataclass
class ExperimentConfig:
    kind: str = "classification"
    method: list = field(default_factory=lambda: ["deepall", "kddg"])
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    epochs: int = 60
    hidden: list = field(default_factory=lambda: [128, 128])
    noise: float = 0.0
    noise_grid: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6])
    alpha: float = 0.1
    split_ratio: float = 0.8
    seeds: list = field(default_factory=lambda: [0])
    compute_mi: bool = True
    mi_folds: int = 5
    save_snapshots: bool = False
    workers: int = 1
    output_dir: str = "out"
    rl: RLSettings = field(default_factory=RLSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    diagnose: DiagnoseSettings = field(default_factory=DiagnoseSettings)

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = [self.method]
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        unknown = [m for m in self.method if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown method(s) {unknown}; choose from {METHODS}")
        if not self.method:
            raise ConfigError("method list is empty")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if any(not isinstance(s, int) or isinstance(s, bool) for s in self.seeds):
            raise ConfigError("seeds must be integers")
        if not 0.0 <= self.noise <= 1.0 or any(not 0.0 <= g <= 1.0 for g in self.noise_grid):
            raise ConfigError("noise ratios must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.epochs < 1 or self.workers < 1 or self.mi_folds < 2:
            raise ConfigError("epochs and workers must be positive, mi_folds at least 2")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must list positive layer widths")
        try:
            self.benchmark.validate()
        except RejectedParameterError as exc:
            raise ConfigError(f"benchmark: {exc}") from None

    @property
    def sizes(self) -> list:
        return [self.benchmark.dim] + list(self.hidden) + [self.benchmark.classes]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        data = dict(data)
        nested = {}
        nested["benchmark"] = _strict(BenchmarkSpec, data.pop("benchmark", None), "benchmark")
        try:
            nested["distill"] = DistillConfig.from_dict(data.pop("distill", None) or {})
        except (TypeError, RejectedParameterError) as exc:
            raise ConfigError(f"distill: {exc}") from None
        nested["optimizer"] = _strict(OptimizerSettings, data.pop("optimizer", None), "optimizer")
        nested["rl"] = _strict(RLSettings, data.pop("rl", None), "rl")
        nested["bench"] = _strict(BenchSettings, data.pop("bench", None), "bench")
        nested["diagnose"] = _strict(DiagnoseSettings, data.pop("diagnose", None), "diagnose")
        try:
            return cls(**data, **nested)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return ExperimentConfig.from_dict(data)
