"""Run the three simulation-figure presets and plot alignment and condition number.

    python3 scripts/reproduce_figure.py --out runs/figure [--jobs 3] [--T2 500]

Plotting needs matplotlib; without it only the CSV/JSON bundle is written.
"""
import argparse
import csv
import sys
from pathlib import Path

from contrastive_dynamics.cli import main as cli_main
from contrastive_dynamics.presets import FIGURE_PRESETS


def read(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def plot(root):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for name in FIGURE_PRESETS:
        path = root / name / "trajectory.csv"
        if not path.exists():
            continue
        t = read(path)
        label = name.removeprefix("figure-")
        ax1.plot(t["step"], t["gamma_align"], label=label)
        ax2.plot(t["step"], t["kappa0"], label=label)
    ax1.set(xlabel="step", ylabel="alignment score")
    ax2.set(xlabel="step", ylabel="condition number of K_A columns", yscale="log")
    ax1.legend()
    fig.tight_layout()
    fig.savefig(root / "figure.png", dpi=120)
    return root / "figure.png"


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/figure")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--T2", type=int)
    args = ap.parse_args()
    argv = ["figure", "--out", args.out, "--jobs", str(args.jobs), "--seed", str(args.seed)]
    if args.T2:
        argv += ["--T2", str(args.T2)]
    code = cli_main(argv)
    try:
        print(f"plot: {plot(Path(args.out))}")
    except ImportError:
        print("matplotlib not installed; skipped the plot")
    return code


if __name__ == "__main__":
    sys.exit(main())
