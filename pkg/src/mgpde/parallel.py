"""Data-parallel training with results independent of the worker count.

Workers are threads in one process. They exchange data only through
:class:`Communicator` collectives (barrier + fixed rank-ordered binary-tree
reduction), which keeps every collective deterministic for a fixed ``p``.
Samples are split so that the union of the local mini-batches at step ``n``
is exactly the global mini-batch ``n`` of a single-worker run.
"""

from __future__ import annotations

import hashlib
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .functional import BNState
from .network import ModelState
from .optim import make_optimizer
from .tensor import Tape, Tensor, backward


class ReplicaDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    p: int = 1
    threads_per_worker: int | None = None

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"worker count p must be >= 1, got {self.p}")


@dataclass(frozen=True)
class Partition:
    """Worker-count-invariant assignment of samples to local mini-batches."""

    n_samples: int  # adjusted N_s (multiple of p)
    batch_size: int  # adjusted b_s (multiple of p)
    p: int
    requested_samples: int

    @property
    def local_samples(self) -> int:
        return self.n_samples // self.p

    @property
    def local_batch(self) -> int:
        return self.batch_size // self.p

    @property
    def n_batches(self) -> int:
        return math.ceil(self.n_samples / self.batch_size)

    def global_batch(self, n: int) -> np.ndarray:
        lo = n * self.batch_size
        return np.arange(lo, min(lo + self.batch_size, self.n_samples))

    def local_positions(self, n: int, rank: int) -> np.ndarray:
        """Slots of global batch ``n`` drawn (contiguously) by worker ``rank``."""
        gb = self.global_batch(n)
        m = gb.size // self.p
        return gb[rank * m : (rank + 1) * m]

    def epoch_table(self) -> tuple[np.ndarray, np.ndarray]:
        """All slots of one epoch at once: ``(positions, step)`` shaped (p, local_samples).

        ``positions[r]`` lists worker ``r``'s slots in step order and ``step`` the
        step each slot belongs to; row ``r`` equals the concatenation of
        ``local_positions(n, r)`` over ``n``.
        """
        slot = np.arange(self.n_samples)
        step = slot // self.batch_size
        within = slot - step * self.batch_size
        size = np.minimum(self.batch_size, self.n_samples - step * self.batch_size)
        rank = within // (size // self.p)
        key = np.lexsort((slot, rank))
        return slot[key].reshape(self.p, -1), step[key].reshape(self.p, -1)

    def sample_ids(self, positions: np.ndarray, order: np.ndarray | None = None) -> np.ndarray:
        """Map slots to sample ids; padded slots wrap around the real samples."""
        ids = positions % self.requested_samples
        return ids if order is None else np.asarray(order)[ids]


def partition(n_samples: int, batch_size: int, p: int) -> Partition:
    """``b_s <- p*floor(b_s/p)``, ``N_s <- p*ceil(N_s/p)``.

    With both multiples of ``p`` the remainder ``N_s mod b_s`` is a multiple of
    ``p`` too, so every local mini-batch at a given step has the same size.
    """
    if n_samples < 1 or batch_size < 1 or p < 1:
        raise ValueError(f"partition arguments must be positive, got N_s={n_samples}, b_s={batch_size}, p={p}")
    if batch_size > n_samples:
        raise ValueError(f"batch size {batch_size} exceeds sample count {n_samples}")
    if batch_size < p:
        raise ValueError(f"batch size {batch_size} < worker count {p}: local mini-batches would be empty")
    b = p * (batch_size // p)
    n = p * math.ceil(n_samples / p)
    return Partition(n, b, p, n_samples)


def tree_sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise sum in rank order: ((v0+v1)+(v2+v3))+..."""
    level = [np.asarray(v, dtype=np.float64) for v in vectors]
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def allreduce_average(vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Every worker receives the same tree-ordered mean of all vectors."""
    shapes = {np.shape(v) for v in vectors}
    if len(shapes) != 1:
        raise ValueError(f"allreduce_average: length mismatch across workers {sorted(shapes)}")
    mean = tree_sum(vectors) / len(vectors)
    return [mean.copy() for _ in vectors]


def sync_bn(states: Sequence[dict[str, BNState]]) -> list[dict[str, BNState]]:
    """Average running means and running variances across workers.

    Variances are averaged as-is (not pooled), so every worker ends with
    identical statistics.
    """
    names = list(states[0])
    for i, s in enumerate(states[1:], 1):
        if list(s) != names or any(s[n].mean.shape != states[0][n].mean.shape for n in names):
            raise ValueError(f"sync_bn: worker {i} has a different batch-norm layer structure")
    out: list[dict[str, BNState]] = [{} for _ in states]
    for n in names:
        means = allreduce_average([s[n].mean for s in states])
        vars_ = allreduce_average([s[n].var for s in states])
        for i in range(len(states)):
            out[i][n] = BNState(means[i], vars_[i])
    return out


@dataclass
class CommCounter:
    grad_reduces: int = 0
    grad_bytes: list[int] = field(default_factory=list)
    loss_reduces: int = 0
    bn_syncs: int = 0
    bn_batch_reduces: int = 0
    bytes_reduced: int = 0
    comm_s: float = 0.0

    def snapshot(self) -> "CommCounter":
        return CommCounter(
            self.grad_reduces, list(self.grad_bytes), self.loss_reduces, self.bn_syncs,
            self.bn_batch_reduces, self.bytes_reduced, self.comm_s,
        )


class Communicator:
    """In-process collective group of ``p`` ranks."""

    def __init__(self, p: int):
        self.p = p
        self._barrier = threading.Barrier(p) if p > 1 else None
        self._slots: list = [None] * p
        self._result = None
        self.counter = CommCounter()

    def abort(self) -> None:
        if self._barrier is not None:
            self._barrier.abort()

    def _wait(self):
        if self._barrier is not None:
            self._barrier.wait()

    def _collective(self, rank: int, value, combine: Callable):
        t0 = time.perf_counter()
        self._slots[rank] = value
        self._wait()
        if rank == 0:
            self._result = combine(list(self._slots))
        self._wait()
        res = self._result
        self._wait()
        if rank == 0:
            self.counter.comm_s += time.perf_counter() - t0
        return res

    def allreduce(self, rank: int, vec: np.ndarray, op: str = "mean", kind: str = "grad") -> np.ndarray:
        vec = np.ascontiguousarray(vec, dtype=np.float64)

        def combine(vs):
            if len({v.shape for v in vs}) != 1:
                raise ValueError(f"allreduce: length mismatch across workers {[v.shape for v in vs]}")
            c = self.counter
            c.bytes_reduced += vec.nbytes
            if kind == "grad":
                c.grad_reduces += 1
                c.grad_bytes.append(vec.nbytes)
            elif kind == "grad+loss":
                # the trailing loss scalar rides along; only gradient bytes are counted
                c.grad_reduces += 1
                c.loss_reduces += 1
                c.grad_bytes.append(vec.nbytes - 8)
            elif kind == "loss":
                c.loss_reduces += 1
            elif kind == "bn":
                c.bn_syncs += 1
            elif kind == "bn_batch":
                c.bn_batch_reduces += 1
            s = tree_sum(vs)
            return s / len(vs) if op == "mean" else s

        return np.array(self._collective(rank, vec, combine))

    def allgather(self, rank: int, obj) -> list:
        return list(self._collective(rank, obj, lambda vs: tuple(vs)))

    def rank(self, rank: int) -> "RankComm":
        return RankComm(self, rank)


@dataclass
class RankComm:
    comm: Communicator
    rank: int

    def allreduce_sum(self, values: np.ndarray) -> np.ndarray:
        return self.comm.allreduce(self.rank, values, op="sum", kind="bn_batch")

    def allreduce_average(self, values: np.ndarray, kind: str = "grad") -> np.ndarray:
        return self.comm.allreduce(self.rank, values, op="mean", kind=kind)

    def allgather(self, obj) -> list:
        return self.comm.allgather(self.rank, obj)


def run_workers(p: int, fn: Callable[[int], object], comm: Communicator | None = None,
                threads_per_worker: int | None = None) -> list:
    """Run ``fn(rank)`` on ``p`` threads; the first exception aborts the group."""
    results: list = [None] * p
    errors: list[BaseException | None] = [None] * p

    def target(rank):
        try:
            results[rank] = fn(rank)
        except BaseException as exc:  # noqa: BLE001 - re-raised on the caller thread
            errors[rank] = exc
            if comm is not None:
                comm.abort()

    limiter = None
    if threads_per_worker:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=threads_per_worker)
    try:
        if p == 1:
            target(0)
        else:
            threads = [threading.Thread(target=target, args=(r,)) for r in range(p)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    primary = [e for e in errors if e is not None and not isinstance(e, threading.BrokenBarrierError)]
    if primary:
        raise primary[0]
    if any(e is not None for e in errors):
        raise next(e for e in errors if e is not None)
    return results


def flat_gradient(model: ModelState, grads) -> np.ndarray:
    return np.concatenate([grads.of(p).ravel() for p in model.parameters()])


def sync_bn_inplace(model: ModelState, rc: RankComm) -> None:
    """Collective form of :func:`sync_bn`: one reduce per BN layer."""
    for nm in model.bn_names():
        st = model.bn[nm]
        c = st.mean.size
        avg = rc.allreduce_average(np.concatenate([st.mean, st.var]), kind="bn")
        model.bn[nm] = BNState(avg[:c].copy(), avg[c:].copy())


LossFn = Callable[[ModelState, np.ndarray, "RankComm | None"], Tensor]


@dataclass
class EpochReport:
    loss: float
    batch_losses: list[float]
    wall_s: float
    compute_s: float
    comm_s: float
    comm: CommCounter
    p: int
    averaged_grads: list[np.ndarray] | None = None


def train_epoch(
    replicas: Sequence[ModelState],
    part: Partition,
    optimizers: Sequence,
    loss_fn: LossFn,
    comm: Communicator | None = None,
    order: np.ndarray | None = None,
    bn_mode: str = "sync",
    keep_grads: bool = False,
    check_coherence: bool = True,
    threads_per_worker: int | None = None,
) -> EpochReport:
    """One epoch: local forward/backward, averaged loss and gradient, shared update.

    ``bn_mode="sync"`` normalizes with statistics over the whole global
    mini-batch (exactly worker-count independent); ``"local"`` uses each
    worker's own mini-batch. Running statistics are averaged across workers at
    the end of the epoch in both modes.
    """
    p = len(replicas)
    if part.p != p or len(optimizers) != p:
        raise ValueError(f"partition for p={part.p}, {len(optimizers)} optimizers, {p} replicas")
    if bn_mode not in ("sync", "local"):
        raise ValueError(f"bn_mode must be 'sync' or 'local', got {bn_mode!r}")
    comm = comm or Communicator(p)
    start_comm = comm.counter.snapshot()
    prints = {m.fingerprint for m in replicas}
    if len(prints) != 1:
        raise ReplicaDivergence("replicas differ in architecture at epoch start")
    t_start = time.perf_counter()

    def worker(rank: int):
        model = replicas[rank]
        opt = optimizers[rank]
        rc = comm.rank(rank)
        reducer = rc if (bn_mode == "sync" and p > 1) else None
        losses, kept = [], []
        compute = 0.0
        for n in range(part.n_batches):
            ids = part.sample_ids(part.local_positions(n, rank), order)
            t0 = time.perf_counter()
            with Tape() as tape:
                loss = loss_fn(model, ids, reducer)
            g = flat_gradient(model, backward(tape, loss))
            compute += time.perf_counter() - t0
            red = rc.allreduce_average(np.concatenate([g, [loss.item()]]), kind="grad+loss")
            gavg, lavg = red[:-1], red[-1]
            t0 = time.perf_counter()
            model.set_flat_parameters(opt.step(model.flat_parameters(), gavg))
            compute += time.perf_counter() - t0
            if check_coherence and p > 1:
                digests = rc.allgather(model.parameter_digest())
                if len(set(digests)) != 1:
                    raise ReplicaDivergence(f"parameter digests differ after step {n}: {digests}")
            losses.append(float(lavg))
            if keep_grads:
                kept.append(gavg)
        if p > 1:
            sync_bn_inplace(model, rc)
        return losses, compute, kept

    results = run_workers(p, worker, comm, threads_per_worker)
    wall = time.perf_counter() - t_start
    losses, compute, kept = results[0]
    now = comm.counter.snapshot()
    delta = CommCounter(
        now.grad_reduces - start_comm.grad_reduces,
        now.grad_bytes[len(start_comm.grad_bytes):],
        now.loss_reduces - start_comm.loss_reduces,
        now.bn_syncs - start_comm.bn_syncs,
        now.bn_batch_reduces - start_comm.bn_batch_reduces,
        now.bytes_reduced - start_comm.bytes_reduced,
        now.comm_s - start_comm.comm_s,
    )
    return EpochReport(
        loss=float(np.mean(losses)),
        batch_losses=losses,
        wall_s=wall,
        compute_s=compute,
        comm_s=delta.comm_s,
        comm=delta,
        p=p,
        averaged_grads=kept if keep_grads else None,
    )


class DataParallel:
    """Replicas, per-worker optimizers and a communicator for one model."""

    def __init__(self, model: ModelState, cluster: ClusterSpec, optimizer: str = "adam",
                 lr: float = 1e-5, bn_mode: str = "sync"):
        self.cluster = cluster
        self.bn_mode = bn_mode
        self.optimizer_name, self.lr = optimizer, lr
        self.replicas = [model.copy() for _ in range(cluster.p)]
        self.optimizers = [make_optimizer(optimizer, lr) for _ in range(cluster.p)]
        self.comm = Communicator(cluster.p)

    @property
    def model(self) -> ModelState:
        return self.replicas[0]

    def replace_model(self, model: ModelState) -> None:
        """Install a new (e.g. adapted) model on every worker with fresh optimizer state."""
        self.replicas = [model.copy() for _ in range(self.cluster.p)]
        self.optimizers = [make_optimizer(self.optimizer_name, self.lr) for _ in range(self.cluster.p)]

    def train_epoch(self, loss_fn: LossFn, n_samples: int, batch_size: int,
                    order: np.ndarray | None = None, keep_grads: bool = False) -> EpochReport:
        part = partition(n_samples, batch_size, self.cluster.p)
        return train_epoch(
            self.replicas, part, self.optimizers, loss_fn, self.comm, order=order,
            bn_mode=self.bn_mode, keep_grads=keep_grads,
            threads_per_worker=self.cluster.threads_per_worker,
        )


def digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()
