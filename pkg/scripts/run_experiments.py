"""Run the convergence, kappa-sweep and CDF experiments and write CSVs.

Usage: python3 scripts/run_experiments.py --out results [--trials 50] [--paper-scale] [--jobs 4]
"""
from __future__ import annotations

import argparse
import sys
import time

from cfisac import cli


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--convergence-trials", type=int, default=5)
    p.add_argument("--cdf-trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--paper-scale", action="store_true")
    args = p.parse_args(argv)

    common = ["--out", args.out, "--seed", str(args.seed), "--jobs", str(args.jobs)]
    if args.paper_scale:
        common.append("--paper-scale")
    runs = [
        ["convergence", "--trials", str(args.convergence_trials), "--strategy", "CP", "--strategy", "SP"],
        ["sweep-kappa", "--trials", str(args.trials), "--kappa-db", "0,1,2,3,4"],
        ["cdf", "--trials", str(args.cdf_trials)],
    ]
    worst = 0
    for cmd in runs:
        t0 = time.perf_counter()
        code = cli.main(cmd + common)
        print(f"{cmd[0]}: exit {code} in {time.perf_counter() - t0:.0f}s", file=sys.stderr)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
