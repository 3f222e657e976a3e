"""Every component and variant cell, then a pivot of mean accuracy per cell.

    python3 scripts/ablation_grid.py --out runs/grid --jobs 4 --steps 500
"""
import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from ssmdg import config as C
from ssmdg.cli import main

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="runs/grid")
ap.add_argument("--jobs", type=int, default=1)
ap.add_argument("--seeds", default="0,1,2")
ap.add_argument("--steps", type=int, default=None)
args = ap.parse_args()

argv = ["ablation-grid", "--out", args.out, "--jobs", str(args.jobs), "--seed-list", args.seeds]
if args.steps:
    argv += ["--set", f"train.steps={args.steps}"]
rc = main(argv)

acc = defaultdict(list)
with open(Path(args.out) / "summary.csv") as fh:
    for row in csv.DictReader(fh):
        if row["status"] == "ok":
            acc[row["variant"]].append(float(row["accuracy"]))
for group, names in (("components", C.COMPONENT_ROWS), ("variants", C.VARIANT_ROWS), ("references", C.REFERENCE_ROWS)):
    print(f"-- {group}")
    for name in names:
        vals = acc.get(name)
        print(f"{name:20s} {np.mean(vals):.4f}" if vals else f"{name:20s} failed")
sys.exit(rc)
