#!/usr/bin/env python3
"""Plot CSV artifacts produced by the CLI (CDFs, bound sweep, convergence).

The tool itself emits only CSV/binary grids; this consumer needs
matplotlib, which is not a package dependency.
"""

import argparse
import glob
import os
import re

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from reflectmap import io as rio


def plot_cdfs(run_dir, ax):
    for path in sorted(glob.glob(os.path.join(run_dir, "cdf_nr*_scale*.csv"))):
        err, prob = rio.read_cdf(path)
        label = re.sub(r".*cdf_(.*)\.csv", r"\1", path)
        ax.plot(err, prob, label=label)
    ax.set_xlabel("error [m]")
    ax.set_ylabel("CDF")
    ax.set_xscale("log")
    ax.legend(fontsize=7)


def plot_bound_sweep(run_dir, ax):
    path = os.path.join(run_dir, "bound_sweep.csv")
    if not os.path.exists(path):
        return
    _, rows = rio.read_csv(path)
    data = np.array([[float(x) for x in r] for r in rows])
    for n_r in sorted(set(data[:, 0])):
        sel = data[data[:, 0] == n_r]
        ax.loglog(sel[:, 1], sel[:, 2], label=f"n_r={int(n_r)}")
    ax.set_xlabel("area ratio")
    ax.set_ylabel("bound / region area")
    ax.legend(fontsize=7)


def plot_convergence(run_dir, ax):
    path = os.path.join(run_dir, "convergence.csv")
    if not os.path.exists(path):
        return
    _, rows = rio.read_csv(path)
    data = np.array([[float(x) for x in r] for r in rows])
    for lam in sorted(set(data[:, 1])):
        sel = data[data[:, 1] == lam]
        ax.semilogx(sel[:, 0], sel[:, 3], label=f"lambda={lam:g}")
    ax.set_xlabel("samples")
    ax.set_ylabel("|estimate| [dB]")
    ax.legend(fontsize=7)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir")
    ap.add_argument("--out", default=None)
    ns = ap.parse_args()
    fig, axes = plt.subplots(1, 3, figsize=(15, 4))
    plot_cdfs(ns.run_dir, axes[0])
    plot_bound_sweep(ns.run_dir, axes[1])
    plot_convergence(ns.run_dir, axes[2])
    out = ns.out or os.path.join(ns.run_dir, "summary.png")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    print(out)
