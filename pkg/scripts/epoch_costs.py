"""Time per epoch across resolutions and worker counts, with reduce counts and bytes.

    python scripts/epoch_costs.py --resolutions 32,64,128 --workers 1,2,4 --samples 8
"""

import argparse
import csv
import sys

import numpy as np

from mgpde.mgtrain import LevelData
from mgpde.network import UNetSpec, build
from mgpde.parallel import ClusterSpec, DataParallel
from mgpde.problem import GridSpec, sample_omegas


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolutions", default="32,64,128")
    ap.add_argument("--workers", default="1,2,4")
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args()

    w = csv.writer(sys.stdout)
    w.writerow(["resolution", "p", "wall_s", "compute_s", "comm_s", "reduces", "bytes_per_reduce", "8*N_w",
                "schema_version"])
    for p in (int(x) for x in args.workers.split(",")):
        for r in (int(x) for x in args.resolutions.split(",")):
            data = LevelData(sample_omegas(args.samples, 0), GridSpec(r))
            dp = DataParallel(build(UNetSpec(), 0), ClusterSpec(p), "adam", 1e-5)
            reps = [dp.train_epoch(data.loss_fn, args.samples, args.batch) for _ in range(args.epochs)]
            med = lambda f: float(np.median([f(x) for x in reps]))
            last = reps[-1].comm
            w.writerow([r, p, med(lambda x: x.wall_s), med(lambda x: x.compute_s), med(lambda x: x.comm_s),
                        last.grad_reduces, sorted(set(last.grad_bytes)), 8 * dp.model.parameter_count, 1])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
