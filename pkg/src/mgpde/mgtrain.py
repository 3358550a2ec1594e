"""Multigrid training schedules and the per-level training driver.

A schedule is a list of (resolution, mode) steps. Restriction steps (moving
to a coarser grid) train for a fixed number of epochs; every other step trains
until the early-stop rule fires. The same model is carried through every
step; inputs are re-evaluated analytically at each step's resolution.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .network import ModelState, adapt as adapt_model, forward, save_checkpoint
from .parallel import ClusterSpec, DataParallel, EpochReport
from .problem import BoundaryMasks, GridSpec, apply_bc, diffusivity_batch, energy_loss, sample_omegas
from .tensor import Tensor

KINDS = ("V", "W", "F", "HalfV", "Base")
_ALIASES = {"v": "V", "w": "W", "f": "F", "halfv": "HalfV", "half-v": "HalfV", "half_v": "HalfV", "base": "Base"}
CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("epoch", "wall_s", "compute_s", "comm_s", "loss", "p", "resolution", "level_index",
               "step_index", "schema_version")


class ScheduleError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


def normalize_kind(kind: str) -> str:
    k = _ALIASES.get(kind.lower()) if kind not in KINDS else kind
    if k is None:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    return k


@dataclass(frozen=True)
class Step:
    resolution: int
    mode: str  # "fixed" or "converge"
    epochs: int | None = None  # fixed-mode epoch count
    level: int = 0  # 0 = finest

    def label(self) -> str:
        return f"({self.resolution},{'f' if self.mode == 'fixed' else 'c'})"


@dataclass(frozen=True)
class Schedule:
    kind: str
    levels: int
    max_resolution: int
    steps: tuple[Step, ...]

    def resolutions(self) -> list[int]:
        return [s.resolution for s in self.steps]

    def describe(self) -> str:
        return "[" + ",".join(s.label() for s in self.steps) + "]"

    def to_json(self) -> dict:
        return {"kind": self.kind, "levels": self.levels, "max_resolution": self.max_resolution,
                "steps": [asdict(s) for s in self.steps]}


def _level_order(kind: str, L: int) -> list[tuple[int, str]]:
    """Visit order over level indices (0 = finest) as (level, 'f'|'c')."""
    if kind == "Base" or L == 1:
        return [(0, "c")]
    coarse = L - 1
    if kind == "HalfV":
        return [(lvl, "c") for lvl in range(coarse, -1, -1)]
    if kind == "V":
        return [(lvl, "f") for lvl in range(coarse)] + [(lvl, "c") for lvl in range(coarse, -1, -1)]
    if kind == "W":
        def w(lvl):
            if lvl == coarse:
                return [(lvl, "c")]
            if lvl == 0:
                return [(0, "f")] + w(1) + [(0, "c")]
            return [(lvl, "f")] + w(lvl + 1) + [(lvl, "f")] + w(lvl + 1) + [(lvl, "c")]

        return w(0)
    # F: one down-sweep; each newly reached level (bottom-up) revisits the coarsest grid
    out = [(lvl, "f") for lvl in range(coarse)] + [(coarse, "c")]
    for lvl in range(coarse - 1, 0, -1):
        out += [(lvl, "f")] + [(j, "f") for j in range(lvl + 1, coarse)] + [(coarse, "c")]
        out += [(j, "c") for j in range(coarse - 1, lvl - 1, -1)]
    return out + [(0, "c")]


def make_schedule(kind: str, max_resolution: int, levels: int, fixed_epochs: int = 5,
                  min_resolution: int = 8) -> Schedule:
    kind = normalize_kind(kind)
    R, L = int(max_resolution), int(levels)
    if R < 1 or R & (R - 1):
        raise ScheduleError(f"max_resolution must be a power of two, got {R}")
    if L < 1:
        raise ScheduleError(f"levels must be >= 1, got {L}")
    if fixed_epochs < 1:
        raise ScheduleError(f"fixed_epochs must be >= 1, got {fixed_epochs}")
    if R >> (L - 1) < max(min_resolution, 4):
        raise ScheduleError(
            f"{L} levels from {R} reach {R >> (L - 1)}, below the minimum resolution {max(min_resolution, 4)}"
        )
    steps = tuple(
        Step(R >> lvl, "fixed" if m == "f" else "converge", fixed_epochs if m == "f" else None, lvl)
        for lvl, m in _level_order(kind, L)
    )
    return Schedule(kind, L, R, steps)


@dataclass(frozen=True)
class EarlyStop:
    """Windowed relative-improvement stop rule.

    ``best`` is the lowest mean over ``patience``-epoch windows that ended at
    least ``patience`` epochs ago; training stops once the current window mean
    improves on it by less than ``rel_tol`` (relative), or at ``max_epochs``.
    """

    patience: int = 10
    rel_tol: float = 1e-3
    max_epochs: int = 1000

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1 or not self.rel_tol >= 0:
            raise ValueError(f"invalid early-stop settings {self}")

    def improvement(self, history) -> float | None:
        P = self.patience
        h = np.asarray(history, dtype=np.float64)
        if h.size < 2 * P:
            return None
        windows = np.convolve(h, np.ones(P) / P, mode="valid")  # windows[j] ends at epoch j+P-1
        current = windows[-1]
        best = windows[: windows.size - P].min()
        return float((best - current) / abs(best)) if best != 0 else 0.0

    def should_stop(self, history) -> bool:
        if len(history) >= self.max_epochs:
            return True
        imp = self.improvement(history)
        return imp is not None and imp < self.rel_tol


@dataclass(frozen=True)
class DatasetSpec:
    omega_count: int = 64
    seed: int | None = 0
    batch_size: int = 64
    rank: int = 2
    shuffle: bool = True


@dataclass
class StepReport:
    index: int
    resolution: int
    level: int
    mode: str
    epochs: int
    wall_s: float
    final_loss: float
    digest_in: str
    digest_out: str
    adapted: bool = False
    stopped_by: str = ""


@dataclass
class TrainReport:
    schedule: dict
    steps: list[StepReport] = field(default_factory=list)
    total_s: float = 0.0
    baseline_s: float | None = None
    losses: list[float] = field(default_factory=list)
    target_reached: bool | None = None

    @property
    def speedup(self) -> float | None:
        return None if self.baseline_s is None else self.baseline_s / self.total_s

    @property
    def final_loss(self) -> float:
        return self.steps[-1].final_loss

    def time_shares(self) -> dict[int, float]:
        tot = sum(s.wall_s for s in self.steps)
        shares: dict[int, float] = {}
        for s in self.steps:
            shares[s.resolution] = shares.get(s.resolution, 0.0) + 100.0 * s.wall_s / tot
        return shares

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "schedule": self.schedule,
            "steps": [asdict(s) for s in self.steps],
            "total_s": self.total_s,
            "baseline_s": self.baseline_s,
            "speedup": self.speedup,
            "time_shares": {str(k): v for k, v in self.time_shares().items()},
            "target_reached": self.target_reached,
        }


def speedup_report(mg: TrainReport, base: TrainReport) -> dict:
    return {
        "schema_version": 1,
        "speedup": base.total_s / mg.total_s,
        "base_total_s": base.total_s,
        "mg_total_s": mg.total_s,
        "base_final_loss": base.final_loss,
        "mg_final_loss": mg.final_loss,
        "mg_time_shares": mg.time_shares(),
        "base_time_shares": base.time_shares(),
    }


class LevelData:
    """Diffusivity inputs of the shared omega set evaluated on one grid."""

    def __init__(self, omegas: np.ndarray, grid: GridSpec):
        self.grid = grid
        self.nu = diffusivity_batch(omegas, grid)
        self.masks = BoundaryMasks(grid)

    def loss_fn(self, model: ModelState, ids: np.ndarray, reducer) -> Tensor:
        nu = self.nu[ids]
        u = apply_bc(forward(model, Tensor(nu), training=True, reducer=reducer), self.masks)
        return energy_loss(u, nu, self.grid)


def predict(model: ModelState, omegas: np.ndarray, grid: GridSpec, batch: int = 16) -> np.ndarray:
    """Network solution fields (BCs applied), evaluated with running BN statistics."""
    masks = BoundaryMasks(grid)
    out = []
    for i in range(0, len(omegas), batch):
        nu = diffusivity_batch(omegas[i : i + batch], grid)
        out.append(apply_bc(forward(model, Tensor(nu), training=False), masks).data[:, 0])
    return np.concatenate(out)


class CsvLog:
    def __init__(self, path: str | Path | None):
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._w = csv.writer(self._fh)
            self._w.writerow(CSV_COLUMNS)
            self._fh.flush()

    def row(self, **vals):
        if self._fh is not None:
            self._w.writerow([vals.get(c, CSV_SCHEMA_VERSION if c == "schema_version" else "") for c in CSV_COLUMNS])
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def run(
    schedule: Schedule,
    model: ModelState,
    dataset: DatasetSpec = DatasetSpec(),
    cluster: ClusterSpec = ClusterSpec(),
    early_stop: EarlyStop = EarlyStop(),
    adapt: bool = False,
    optimizer: str = "adam",
    lr: float = 1e-5,
    bn_mode: str = "sync",
    out_dir: str | Path | None = None,
    target_loss: float | None = None,
    step_max_epochs: dict[int, int] | None = None,
    adapt_seed: int = 1000,
    checkpoint_every: int = 0,
    on_epoch: Callable[[int, Step, EpochReport], None] | None = None,
) -> tuple[ModelState, TrainReport]:
    """Train ``model`` through every step of ``schedule``.

    ``target_loss`` ends the final step as soon as the epoch loss reaches it
    (time-to-loss comparisons). ``step_max_epochs`` caps converge steps per
    resolution, on top of ``early_stop.max_epochs``.
    """
    omegas = sample_omegas(dataset.omega_count, dataset.seed)
    if model.spec.spatial_rank != dataset.rank:
        raise ValueError(f"model rank {model.spec.spatial_rank} != dataset rank {dataset.rank}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = CsvLog(out / "epochs.csv" if out else None)
    dp = DataParallel(model, cluster, optimizer, lr, bn_mode)
    report = TrainReport(schedule.to_json())
    shuffle_rng = np.random.default_rng([dataset.seed or 0, 7919])
    epoch = 0
    prev_res = None
    data_cache: dict[int, LevelData] = {}
    try:
        for si, step in enumerate(schedule.steps):
            t_step = time.perf_counter()
            adapted = False
            if adapt and prev_res is not None and step.resolution > prev_res:
                dp.replace_model(adapt_model(dp.model, adapt_seed + si))
                adapted = True
            digest_in = dp.model.parameter_digest()
            if step.resolution not in data_cache:
                data_cache[step.resolution] = LevelData(omegas, GridSpec(step.resolution, dataset.rank))
            data = data_cache[step.resolution]
            last = si == len(schedule.steps) - 1
            if step.mode == "fixed":
                stop = EarlyStop(early_stop.patience, early_stop.rel_tol, step.epochs)
                use_rule = False
            else:
                cap = early_stop.max_epochs
                if step_max_epochs and step.resolution in step_max_epochs:
                    cap = min(cap, step_max_epochs[step.resolution])
                stop = EarlyStop(early_stop.patience, early_stop.rel_tol, cap)
                use_rule = True
            history: list[float] = []
            stopped_by = ""
            while True:
                order = shuffle_rng.permutation(dataset.omega_count) if dataset.shuffle else None
                rep = dp.train_epoch(data.loss_fn, dataset.omega_count, dataset.batch_size, order)
                if not math.isfinite(rep.loss):
                    raise TrainingDivergence(
                        f"non-finite loss at step {si} (resolution {step.resolution}, mode {step.mode}), "
                        f"epoch {len(history)} of the step"
                    )
                history.append(rep.loss)
                report.losses.append(rep.loss)
                log.row(epoch=epoch, wall_s=rep.wall_s, compute_s=rep.compute_s, comm_s=rep.comm_s,
                        loss=repr(rep.loss), p=cluster.p, resolution=step.resolution,
                        level_index=step.level, step_index=si)
                epoch += 1
                if out is not None and checkpoint_every and epoch % checkpoint_every == 0:
                    save_checkpoint(dp.model, out / f"epoch{epoch:05d}.ckpt", extra={"epoch": epoch, "step": si})
                if on_epoch is not None:
                    on_epoch(epoch, step, rep)
                if last and target_loss is not None and rep.loss <= target_loss:
                    stopped_by = "target"
                    break
                if len(history) >= stop.max_epochs:
                    stopped_by = "max_epochs"
                    break
                if use_rule and stop.should_stop(history):
                    stopped_by = "early_stop"
                    break
            wall = time.perf_counter() - t_step
            report.steps.append(StepReport(si, step.resolution, step.level, step.mode, len(history), wall,
                                           history[-1], digest_in, dp.model.parameter_digest(), adapted,
                                           stopped_by))
            report.total_s += wall
            if out is not None:
                save_checkpoint(dp.model, out / f"step{si:02d}_res{step.resolution}.ckpt",
                                extra={"step": si, "resolution": step.resolution, "epochs": len(history)})
            prev_res = step.resolution
    finally:
        log.close()
    if target_loss is not None:
        report.target_reached = report.steps[-1].stopped_by == "target"
    if out is not None:
        (out / "train_report.json").write_text(json.dumps(report.to_json(), indent=2))
    return dp.model, report
