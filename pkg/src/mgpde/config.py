"""Run configuration: nested dataclasses loaded from JSON and validated."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ProblemConfig:
    rank: int = 2
    max_resolution: int = 64
    omega_count: int = 64
    sample_seed: int | None = 0


@dataclass
class NetworkConfig:
    depth: int = 3
    base_filters: int = 16
    init_seed: int = 0


@dataclass
class EarlyStopConfig:
    patience: int = 10
    rel_tol: float = 1e-3


@dataclass
class TrainingConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-5
    global_batch_size: int = 64
    max_epochs: int = 3000
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    bn_mode: str = "sync"


@dataclass
class MultigridConfig:
    kind: str = "HalfV"
    levels: int = 3
    fixed_epochs: int = 5
    adapt: bool = False


@dataclass
class ClusterConfig:
    p: int = 1
    threads_per_worker: int | None = None


@dataclass
class OutputConfig:
    directory: str = "runs/default"
    checkpoint_every: int = 0  # 0: step boundaries only


@dataclass
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    multigrid: MultigridConfig = field(default_factory=MultigridConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        from .mgtrain import ScheduleError, make_schedule

        def need(cond, key, msg):
            if not cond:
                raise ConfigError(key, msg)

        p, n, t, m, c = self.problem, self.network, self.training, self.multigrid, self.cluster
        need(p.rank in (2, 3), "problem.rank", f"must be 2 or 3, got {p.rank}")
        R = p.max_resolution
        need(R >= 4 and R & (R - 1) == 0, "problem.max_resolution", f"must be a power of two >= 4, got {R}")
        need(p.omega_count >= 1, "problem.omega_count", f"must be >= 1, got {p.omega_count}")
        need(n.depth >= 1, "network.depth", f"must be >= 1, got {n.depth}")
        need(n.base_filters >= 1, "network.base_filters", f"must be >= 1, got {n.base_filters}")
        need(t.optimizer in ("adam", "sgd"), "training.optimizer", f"must be 'adam' or 'sgd', got {t.optimizer!r}")
        need(t.learning_rate > 0, "training.learning_rate", f"must be > 0, got {t.learning_rate}")
        need(1 <= t.global_batch_size <= p.omega_count, "training.global_batch_size",
             f"must be in [1, problem.omega_count={p.omega_count}], got {t.global_batch_size}")
        need(t.max_epochs >= 1, "training.max_epochs", f"must be >= 1, got {t.max_epochs}")
        need(t.early_stop.patience >= 1, "training.early_stop.patience", "must be >= 1")
        need(t.early_stop.rel_tol >= 0, "training.early_stop.rel_tol", "must be >= 0")
        need(t.bn_mode in ("sync", "local"), "training.bn_mode", f"must be 'sync' or 'local', got {t.bn_mode!r}")
        need(c.p >= 1, "cluster.p", f"must be >= 1, got {c.p}")
        need(c.p <= t.global_batch_size, "cluster.p",
             f"{c.p} workers exceed training.global_batch_size={t.global_batch_size}")
        need(c.threads_per_worker is None or c.threads_per_worker >= 1, "cluster.threads_per_worker", "must be >= 1")
        need(self.output.checkpoint_every >= 0, "output.checkpoint_every", "must be >= 0")
        try:
            make_schedule(m.kind, R, m.levels, m.fixed_epochs, min_resolution=2**n.depth)
        except ScheduleError as exc:
            raise ConfigError("multigrid", str(exc)) from exc
        if m.adapt:
            need(n.depth >= 2, "multigrid.adapt", "architectural adaptation needs network.depth >= 2")
        return self


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", f"expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else k
        if k not in known:
            raise ConfigError(key, "unknown key")
        default = known[k].default_factory() if callable(known[k].default_factory) else known[k].default
        if is_dataclass(default):
            kwargs[k] = _build(type(default), v, key)
        else:
            kwargs[k] = _coerce(key, default, v)
    return cls(**kwargs)


def _coerce(key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) or (default is None and key.endswith(("seed", "threads_per_worker"))):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path} is not valid JSON ({exc})") from exc
        cfg = _build(RunConfig, data, "")
    env = os.environ.get("MGPDE_THREADS")
    if env:
        try:
            cfg.cluster.threads_per_worker = int(env)
        except ValueError as exc:
            raise ConfigError("MGPDE_THREADS", f"expected an integer, got {env!r}") from exc
    return cfg.validate()
