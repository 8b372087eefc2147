"""Freeze the token-horizon reference run into tests/data/reference_run.json.

Reads sweep_runs.csv from an existing ``ctfg sweep`` output directory, or runs
the sweep (s in {5, 20}, both optimizers, seeds 0-2, held-out user D) itself.

    ctfg sweep --synthetic --out runs/horizon --tokens 5,20 --seeds 0,1,2 --train.probe_interval 0
    python3 scripts/freeze_reference.py --from-sweep runs/horizon
"""

import argparse
import csv
import json
from collections import defaultdict
from pathlib import Path

from ctfg.dataio import SplitPlan
from ctfg.evalharness import SyntheticTaskSpec, TransferSettings, population_std, sweep_tokens, synthetic_windows

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "reference_run.json"


def runs_from_sweep(directory: Path) -> dict:
    cells = defaultdict(list)
    with open(directory / "sweep_runs.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            cells[f"{row['optimizer']}_s{row['tokens']}"].append(float(row["accuracy"]))
    return cells


def runs_from_scratch() -> dict:
    spec = SyntheticTaskSpec()
    windows = synthetic_windows(spec, seed=0)
    reports = sweep_tokens(windows, [SplitPlan(spec.groups(), "D")], [5, 20], ["grpo", "ppo"], [0, 1, 2],
                           TransferSettings(probe_interval=0))
    return {f"{r.optimizer}_s{r.tokens}": r.accuracies.tolist() for r in reports}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--from-sweep", type=Path)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    runs = runs_from_sweep(args.from_sweep) if args.from_sweep else runs_from_scratch()
    cells = {k: {"accuracies": v, "mean": sum(v) / len(v), "std": population_std(v)} for k, v in sorted(runs.items())}
    g20, p20, g5 = cells["grpo_s20"], cells["ppo_s20"], cells["grpo_s5"]
    frozen = {
        "setup": "synthetic default task, held-out user D, seeds 0-2, 100 epochs",
        "cells": {k: {"mean": round(c["mean"], 6), "std": round(c["std"], 6)} for k, c in cells.items()},
        "runs": {k: c["accuracies"] for k, c in cells.items()},
        "std_margin_s20": round(p20["std"] - g20["std"], 6),
        "grpo_mean_gap_s20_s5": round(abs(g20["mean"] - g5["mean"]), 6),
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(frozen, indent=2) + "\n")
    print(json.dumps(frozen["cells"], indent=2))


if __name__ == "__main__":
    main()
