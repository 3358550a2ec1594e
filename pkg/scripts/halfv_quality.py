"""Half-V training to 64x64 at the default hyperparameters, scored on held-out omegas against FEM.

    python scripts/halfv_quality.py --out runs/halfv64 --budget 16:2300,32:450,64:250
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from mgpde.cli import HELD_OUT_SEED, compare_fields
from mgpde.fem import fem_solution
from mgpde.mgtrain import DatasetSpec, EarlyStop, make_schedule, predict, run
from mgpde.network import UNetSpec, build
from mgpde.parallel import ClusterSpec
from mgpde.problem import GridSpec, sample_omegas


def parse_budget(text):
    return {int(k): int(v) for k, v in (item.split(":") for item in text.split(","))} if text else None


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/halfv64")
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--lr", type=float, default=1e-5)
    ap.add_argument("--max-epochs", type=int, default=3000)
    ap.add_argument("--budget", default="16:2300,32:450,64:250", help="per-resolution epoch caps")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--test-count", type=int, default=10)
    args = ap.parse_args()

    t0 = time.perf_counter()
    last = {"t": t0}

    def progress(epoch, step, rep):
        if time.perf_counter() - last["t"] > 30:
            last["t"] = time.perf_counter()
            print(f"epoch {epoch} res {step.resolution} loss {rep.loss:.5f}", flush=True)

    model, report = run(
        make_schedule("HalfV", args.resolution, args.levels), build(UNetSpec(), 0), DatasetSpec(64, 0, 64),
        ClusterSpec(args.workers), EarlyStop(10, 1e-3, args.max_epochs), lr=args.lr, out_dir=args.out,
        step_max_epochs=parse_budget(args.budget), on_epoch=progress,
    )
    g = GridSpec(args.resolution)
    test_w = sample_omegas(args.test_count, HELD_OUT_SEED)
    pred = predict(model, test_w, g)
    errors = [compare_fields(pred[i], fem_solution(w, g), g) for i, w in enumerate(test_w)]
    summary = {
        "schema_version": 1,
        "epochs": len(report.losses),
        "steps": [(s.resolution, s.epochs, s.stopped_by) for s in report.steps],
        "final_loss": report.final_loss,
        "l2_rel_errors": [e[0] for e in errors],
        "within_10pct": int(sum(e[0] <= 0.10 for e in errors)),
        "wall_s": time.perf_counter() - t0,
    }
    Path(args.out, "quality.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    print("median held-out error", float(np.median(summary["l2_rel_errors"])))


if __name__ == "__main__":
    main()
