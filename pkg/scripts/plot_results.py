"""Plot the CSVs written by run_experiments.py (needs the ``plot`` extra).

Usage: python3 scripts/plot_results.py results
"""
from __future__ import annotations

import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_rows(path: Path) -> list[dict]:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def plot_convergence(rows, out: Path):
    fig, ax = plt.subplots()
    series = defaultdict(list)
    for r in rows:
        if r["phase"] in ("init", "phase1", "main", "restart"):
            series[(r["strategy"], r["seed"])].append(float(r["rate_secrecy_mean"]))
    for (s, seed), ys in series.items():
        ax.plot(ys, color="C0" if s == "CP" else "C1", alpha=0.6, label=s if seed == "0" else None)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean secrecy rate [bit/s/Hz]")
    ax.legend()
    fig.savefig(out / "convergence.png", dpi=120)


def plot_sweep(rows, out: Path):
    fig, ax = plt.subplots()
    by = defaultdict(list)
    for r in rows:
        by[r["strategy"]].append((float(r["kappa_db"]), float(r["secrecy_mean"]), float(r["secrecy_std"] or "nan")))
    for s, pts in by.items():
        pts.sort()
        x, y, e = zip(*pts)
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=s)
    ax.set_xlabel("MASR threshold kappa [dB]")
    ax.set_ylabel("mean secrecy rate [bit/s/Hz]")
    ax.legend()
    fig.savefig(out / "kappa_sweep.png", dpi=120)


def plot_cdf(rows, out: Path):
    fig, ax = plt.subplots()
    by = defaultdict(lambda: ([], []))
    for r in rows:
        by[r["strategy"]][0].append(float(r["secrecy"]))
        by[r["strategy"]][1].append(float(r["cdf"]))
    for s, (x, f) in by.items():
        ax.step(x, f, where="post", label=s)
    ax.set_xlabel("mean secrecy rate [bit/s/Hz]")
    ax.set_ylabel("CDF")
    ax.legend()
    fig.savefig(out / "cdf.png", dpi=120)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0] if argv else "results")
    for name, fn in (("convergence.csv", plot_convergence), ("kappa_sweep.csv", plot_sweep),
                     ("cdf.csv", plot_cdf)):
        path = out / name
        if path.exists():
            fn(read_rows(path), out)
            print(f"wrote {path.with_suffix('.png')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
