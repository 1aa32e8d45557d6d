#!/usr/bin/env python3
"""Full experiment battery: error CDFs over the noise / path-count grid and
the ambiguity-bound verification ensembles.

Desk-scale by default (about an hour single-threaded); pass --threads N to
fan trial loops out over a process pool, and --trials / --structures to
shrink further.
"""

import argparse
import sys

from reflectmap.cli import main


def run(args):
    rc = main(args)
    if rc != 0:
        sys.exit(rc)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/experiments")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--structures", type=int, default=100)
    ns = ap.parse_args()

    common = ["--out", ns.out, "--seed", str(ns.seed),
              "--threads", str(ns.threads)]
    run([*common, "--override", f"cdf.trials={ns.trials}", "experiment-cdf"])
    run([*common, "--override", f"bounds.structures={ns.structures}", "bounds"])
    print(f"artifacts in {ns.out}")
