"""GRPO against the PPO+GAE baseline on every leave-one-user-out transfer.

Prints per-transfer accuracy and the mean reward curve every 10 epochs.

    python3 scripts/compare_optimizers.py --seeds 0,1,2 --epochs 100
"""

import argparse

import numpy as np

from ctfg.dataio import SplitPlan
from ctfg.evalharness import (ExperimentReport, SyntheticTaskSpec, TransferSettings, run_many,
                              synthetic_windows)
from ctfg.grpo import GrpoConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--tokens", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    spec = SyntheticTaskSpec()
    windows = synthetic_windows(spec, seed=0)
    seeds = [int(s) for s in args.seeds.split(",")]
    base = TransferSettings(probe_interval=10, grpo=GrpoConfig(tokens=args.tokens, epochs=args.epochs))
    for opt in ("grpo", "ppo"):
        tasks = [(windows, SplitPlan(spec.groups(), h), base.with_tokens(args.tokens, opt), seed)
                 for h in spec.groups() for seed in seeds]
        records = run_many(tasks, args.jobs)
        report = ExperimentReport.from_records(records)
        curve = np.mean([[m["mean_reward"] for m in r.metrics] for r in records], axis=0)
        print(report.summary_text(), end="")
        print("  reward curve:", " ".join(f"{v:.0f}" for v in curve[9::10]))
        print("  accuracy trace:", " ".join(f"{e}:{a:.3f}" for e, a in report.trace))
        print()


if __name__ == "__main__":
    main()
