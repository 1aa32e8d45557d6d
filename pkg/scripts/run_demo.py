#!/usr/bin/env python3
"""End-to-end demo at desk scale: simulate -> build-map -> localize.

Writes everything under runs/demo (override with REFLECTMAP_OUT or --out).
"""

import sys

from reflectmap.cli import main

OUT = "runs/demo"


def run(args):
    rc = main(args)
    if rc != 0:
        sys.exit(rc)


if __name__ == "__main__":
    extra = sys.argv[1:]
    run(["--out", OUT, *extra, "simulate"])
    run(["--out", OUT, *extra, "build-map"])
    run(["--out", OUT, *extra, "localize", "--dump-surface"])
    print(f"artifacts in {OUT}")
