"""Full method vs the two reference baselines on the default task.

    python3 scripts/compare_presets.py --seeds 0,1,2,3,4 --out runs/compare
"""
import argparse
import json
from pathlib import Path

import numpy as np

from ssmdg import config as C
from ssmdg.cli import write_run

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", default="0,1,2,3,4")
ap.add_argument("--steps", type=int, default=None)
ap.add_argument("--jobs", type=int, default=1)
ap.add_argument("--out", default="runs/compare")
ap.add_argument("--set", action="append", default=[])
args = ap.parse_args()

seeds = [int(s) for s in args.seeds.split(",")]
extra = list(args.set) + ([f"train.steps={args.steps}"] if args.steps else [])
rows = {}
for preset in ("Supervised-only", "FusedOnly", "Full"):
    cfg = C.apply_overrides(C.ExperimentConfig(), [f"preset={preset}", f"seeds={seeds}"] + extra)
    report = write_run(Path(args.out) / preset, cfg, args.jobs)
    runs = report["runs"]

    def avg(key):
        vals = [r[key] for r in runs if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    rows[preset] = {
        "mean": report["summary"]["mean"],
        "std": report["summary"]["std"],
        "consensus_pl": avg("pl_accuracy_consensus"),
        "disagreement_pl": avg("pl_accuracy_disagreement"),
    }
    print(f"{preset:16s} acc {rows[preset]['mean']:.4f} +- {rows[preset]['std']:.4f}", flush=True)

gain = 100 * (rows["Full"]["mean"] - rows["Supervised-only"]["mean"])
print(f"Full - Supervised-only: {gain:+.2f} points; Full - FusedOnly: "
      f"{100 * (rows['Full']['mean'] - rows['FusedOnly']['mean']):+.2f} points")
(Path(args.out) / "comparison.json").write_text(json.dumps(rows, indent=2) + "\n")
