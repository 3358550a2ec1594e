"""Command-line entry point: ``mgpde <verb> ...``.

Failures print one JSON object to stderr and exit with 2 (configuration),
3 (numerical failure) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .fem import ConvergenceError, fem_solution
from .fieldio import FormatError, read_manifest, write_field, write_manifest
from .mgtrain import (DatasetSpec, EarlyStop, LevelData, ScheduleError, TrainingDivergence, make_schedule,
                      predict, run)
from .network import UNetSpec, build, load_checkpoint, save_checkpoint
from .parallel import ClusterSpec, DataParallel
from .problem import BoundaryMasks, GridSpec, diffusivity_field, sample_omegas

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
HELD_OUT_SEED = 20_240_917


class UsageError(ValueError):
    pass


def _omega_arg(text: str) -> np.ndarray:
    try:
        w = np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"--omega-values: cannot parse {text!r}") from exc
    if w.shape != (4,):
        raise UsageError(f"--omega-values needs 4 comma-separated numbers, got {w.size}")
    return w


def _pick_omega(args) -> tuple[np.ndarray, dict]:
    if getattr(args, "omega_values", None):
        return _omega_arg(args.omega_values), {}
    idx = args.omega
    if idx is None:
        raise UsageError("give --omega INDEX or --omega-values w1,w2,w3,w4")
    if args.manifest:
        ws = read_manifest(args.manifest)
        src = {"manifest": str(args.manifest)}
    else:
        ws = sample_omegas(idx + 1, seed=HELD_OUT_SEED)
        src = {"held_out_seed": HELD_OUT_SEED}
    if not 0 <= idx < len(ws):
        raise UsageError(f"--omega {idx} out of range (0..{len(ws) - 1})")
    return ws[idx], {**src, "index": idx}


def cmd_generate(args) -> dict:
    cfg = load_config(args.config)
    count = args.count or cfg.problem.omega_count
    seed = cfg.problem.sample_seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    omegas = sample_omegas(count, seed)
    write_manifest(out / "manifest.jsonl", omegas, seed)
    res = args.resolution or cfg.problem.max_resolution
    if args.render:
        grid = GridSpec(res, cfg.problem.rank)
        for i, w in enumerate(omegas):
            write_field(out / f"nu_{i:05d}.mgpd", diffusivity_field(w, grid), "nu", omega=w, seed=seed, index=i)
    return {"manifest": str(out / "manifest.jsonl"), "count": count, "rendered": bool(args.render)}


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg.cluster.p = args.workers
    if args.out:
        cfg.output.directory = args.out
    if args.max_epochs is not None:
        cfg.training.max_epochs = args.max_epochs
    cfg.validate()
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    spec = UNetSpec(depth=cfg.network.depth, base_filters=cfg.network.base_filters, spatial_rank=cfg.problem.rank)
    model = build(spec, cfg.network.init_seed)
    sched = make_schedule(cfg.multigrid.kind, cfg.problem.max_resolution, cfg.multigrid.levels,
                          cfg.multigrid.fixed_epochs, min_resolution=spec.min_extent)
    t = cfg.training
    model, report = run(
        sched, model,
        DatasetSpec(cfg.problem.omega_count, cfg.problem.sample_seed, t.global_batch_size, cfg.problem.rank),
        ClusterSpec(cfg.cluster.p, cfg.cluster.threads_per_worker),
        EarlyStop(t.early_stop.patience, t.early_stop.rel_tol, t.max_epochs),
        adapt=cfg.multigrid.adapt, optimizer=t.optimizer, lr=t.learning_rate, bn_mode=t.bn_mode,
        out_dir=out, checkpoint_every=cfg.output.checkpoint_every,
    )
    save_checkpoint(model, out / "final.ckpt", extra={"config": cfg.to_dict()})
    return {"directory": str(out), "checkpoint": str(out / "final.ckpt"), "total_s": report.total_s,
            "final_loss": report.final_loss, "epochs": len(report.losses)}


def cmd_infer(args) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    w, src = _pick_omega(args)
    grid = GridSpec(args.resolution, model.spec.spatial_rank)
    t0 = time.perf_counter()
    u = predict(model, w[None], grid)[0]
    dt = time.perf_counter() - t0
    write_field(args.out, u, "u", omega=w, resolution_source="network", **src)
    return {"out": str(args.out), "inference_s": dt}


def cmd_fem_solve(args) -> dict:
    w, src = _pick_omega(args)
    grid = GridSpec(args.resolution, args.rank)
    t0 = time.perf_counter()
    u = fem_solution(w, grid, tol=args.tol, jacobi=args.jacobi)
    dt = time.perf_counter() - t0
    write_field(args.out, u, "u", omega=w, solver="cg", **src)
    return {"out": str(args.out), "fem_solve_s": dt}


def compare_fields(u: np.ndarray, ref: np.ndarray, grid: GridSpec) -> tuple[float, float]:
    """Relative L2 error over interior nodes, and max-abs error over all nodes."""
    interior = BoundaryMasks(grid).chi_int.astype(bool)
    l2 = float(np.linalg.norm((u - ref)[interior]) / np.linalg.norm(ref[interior]))
    return l2, float(np.max(np.abs(u - ref)))


def cmd_compare(args) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    w, src = _pick_omega(args)
    grid = GridSpec(args.resolution, model.spec.spatial_rank)
    t0 = time.perf_counter()
    u = predict(model, w[None], grid)[0]
    t_inf = time.perf_counter() - t0
    t0 = time.perf_counter()
    ref = fem_solution(w, grid)
    t_fem = time.perf_counter() - t0
    l2, linf = compare_fields(u, ref, grid)
    if args.diff_out:
        write_field(args.diff_out, u - ref, "diff", omega=w, **src)
    return {"schema_version": 1, "l2_rel_error": l2, "linf_error": linf, "inference_s": t_inf,
            "fem_solve_s": t_fem, "omega": [float(x) for x in w], "resolution": args.resolution}


def cmd_schedule(args) -> dict | None:
    s = make_schedule(args.kind, args.max_res, args.levels, args.fixed_epochs)
    if args.json:
        return s.to_json()
    print(s.describe())
    return None


def cmd_bench(args) -> dict:
    resolutions = [int(x) for x in args.resolutions.split(",")]
    workers = [int(x) for x in args.workers.split(",")]
    omegas_n = args.samples
    rows = []
    spec = UNetSpec(depth=args.depth, base_filters=args.base_filters)
    for p in workers:
        for r in resolutions:
            data = LevelData(sample_omegas(omegas_n, 0), GridSpec(r))
            dp = DataParallel(build(spec, 0), ClusterSpec(p), lr=1e-5)
            times = []
            for _ in range(args.epochs):
                rep = dp.train_epoch(data.loss_fn, omegas_n, min(args.batch, omegas_n))
                times.append((rep.wall_s, rep.compute_s, rep.comm_s))
            wall, comp, comm = np.median(np.array(times), axis=0)
            rows.append({"resolution": r, "p": p, "samples": omegas_n, "epochs": args.epochs,
                         "wall_s": wall, "compute_s": comp, "comm_s": comm, "schema_version": 1})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return {"out": str(out), "rows": rows}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mgpde", description="Multigrid-trained neural Poisson solver")
    sub = ap.add_subparsers(dest="verb", required=True)

    def omega_opts(p):
        p.add_argument("--omega", type=int, help="index into --manifest (or the built-in held-out set)")
        p.add_argument("--omega-values", help="explicit w1,w2,w3,w4")
        p.add_argument("--manifest", type=Path)

    g = sub.add_parser("generate")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--resolution", type=int)
    g.add_argument("--render", action="store_true", help="also write nu fields")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train")
    t.add_argument("--config")
    t.add_argument("--workers", type=int)
    t.add_argument("--out")
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--resolution", type=int, required=True)
    i.add_argument("--out", required=True)
    omega_opts(i)
    i.set_defaults(fn=cmd_infer)

    f = sub.add_parser("fem-solve")
    f.add_argument("--resolution", type=int, required=True)
    f.add_argument("--rank", type=int, default=2)
    f.add_argument("--tol", type=float, default=1e-12)
    f.add_argument("--jacobi", action="store_true")
    f.add_argument("--out", required=True)
    omega_opts(f)
    f.set_defaults(fn=cmd_fem_solve)

    c = sub.add_parser("compare")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--resolution", type=int, required=True)
    c.add_argument("--diff-out")
    omega_opts(c)
    c.set_defaults(fn=cmd_compare)

    s = sub.add_parser("schedule")
    s.add_argument("--kind", required=True)
    s.add_argument("--max-res", type=int, required=True)
    s.add_argument("--levels", type=int, required=True)
    s.add_argument("--fixed-epochs", type=int, default=5)
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_schedule)

    b = sub.add_parser("bench")
    b.add_argument("--resolutions", default="16,32,64")
    b.add_argument("--workers", default="1")
    b.add_argument("--samples", type=int, default=16)
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--epochs", type=int, default=3)
    b.add_argument("--depth", type=int, default=3)
    b.add_argument("--base-filters", type=int, default=16)
    b.add_argument("--out", default="bench.csv")
    b.set_defaults(fn=cmd_bench)
    return ap


def _classify(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ScheduleError, UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (TrainingDivergence, ConvergenceError, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_NUMERIC


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.fn(args)
    except Exception as exc:  # noqa: BLE001 - converted to a structured error
        code = _classify(exc)
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, ConfigError):
            err["key"] = exc.key
        print(json.dumps(err), file=sys.stderr)
        return code
    if result is not None:
        print(json.dumps(result, default=_json_default))
    return EXIT_OK


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o).__name__)


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
