"""Accuracy versus token count for GRPO and PPO on the synthetic task.

    python3 scripts/token_sweep.py --tokens 5,10,15,20 --seeds 0,1,2 --jobs 1
"""

import argparse

from ctfg.dataio import SplitPlan
from ctfg.evalharness import SyntheticTaskSpec, TransferSettings, sweep_tokens, synthetic_windows


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=_ints, default=[5, 10, 15, 20])
    ap.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    ap.add_argument("--holdouts", default="D", help="comma-separated held-out groups")
    ap.add_argument("--optimizers", default="grpo,ppo")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    spec = SyntheticTaskSpec()
    windows = synthetic_windows(spec, seed=0)
    plans = [SplitPlan(spec.groups(), h) for h in args.holdouts.split(",")]
    reports = sweep_tokens(windows, plans, args.tokens, args.optimizers.split(","), args.seeds,
                           TransferSettings(probe_interval=0), jobs=args.jobs)
    print(f"{'s':>3} {'optimizer':<9} {'mean':>7} {'std':>7}")
    for r in reports:
        print(f"{r.tokens:>3} {r.optimizer:<9} {r.mean:7.4f} {r.std:7.4f}")


if __name__ == "__main__":
    main()
