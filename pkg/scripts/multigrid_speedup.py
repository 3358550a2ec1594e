"""Wall time of a multigrid schedule to reach the final loss of a full-resolution Base run.

    python scripts/multigrid_speedup.py --resolutions 128,256 --kind HalfV --levels 3
"""

import argparse
import json
from pathlib import Path

from mgpde.mgtrain import DatasetSpec, EarlyStop, make_schedule, run, speedup_report
from mgpde.network import UNetSpec, build
from mgpde.parallel import ClusterSpec


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolutions", default="128,256")
    ap.add_argument("--kind", default="HalfV")
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--lr", type=float, default=1e-5)
    ap.add_argument("--max-epochs", type=int, default=3000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/speedup")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = DatasetSpec(args.samples, 0, args.batch)
    es = EarlyStop(10, 1e-3, args.max_epochs)
    cluster = ClusterSpec(args.workers)
    rows = []
    for R in (int(r) for r in args.resolutions.split(",")):
        _, base = run(make_schedule("Base", R, 1), build(UNetSpec(), 0), ds, cluster, es, lr=args.lr,
                      out_dir=out / f"base{R}")
        _, mg = run(make_schedule(args.kind, R, args.levels), build(UNetSpec(), 0), ds, cluster, es, lr=args.lr,
                    out_dir=out / f"{args.kind.lower()}{R}", target_loss=base.final_loss)
        rep = speedup_report(mg, base)
        rep.update(resolution=R, kind=args.kind, target_reached=mg.target_reached,
                   time_ratio=mg.total_s / base.total_s)
        rows.append(rep)
        print(json.dumps(rep), flush=True)
    (out / "speedup.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
