"""Command-line entry point: train, sweep, compare, synth, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import ConfigError, RunConfig, load_config
from .dataio import DataError, Schema, SplitPlan, WindowSet, load_recordings, parse_groups, split_logo, \
    windows_from_recordings, zscore_per_user
from .evalharness import ExperimentReport, TransferRecord, TransferSettings, fit_logreg, evaluate, \
    make_synthetic, population_std, report_filename, run_many, run_transfer, sweep_tokens, synthetic_windows
from .policy import Policy

METRIC_COLUMNS = ["optimizer", "epoch", "mean_reward", "r_cls", "r_inv", "r_tmp", "loss", "mean_kl",
                  "grad_norm", "value_loss"]
REWARD_COLUMNS = ["optimizer", "epoch", "g", "r_cls", "r_inv", "r_tmp", "total"]


class UsageError(Exception):
    pass


# --- shared plumbing ----------------------------------------------------------------

def settings_from(cfg: RunConfig) -> TransferSettings:
    t = cfg.train
    return TransferSettings(optimizer=t.optimizer, grpo=cfg.grpo, gae=cfg.gae, weights=cfg.rewards,
                            encoder=cfg.model.encoder(), token_dim=cfg.model.token_dim,
                            init_log_sigma=cfg.model.init_log_sigma, lr=t.lr, proj_lr=t.proj_lr,
                            samples_per_cell=t.samples_per_cell, l2=t.l2, probe_interval=t.probe_interval,
                            checked=t.checked)


def load_dataset(cfg: RunConfig) -> tuple[WindowSet, dict[str, list[int]]]:
    """Windows plus the LOGO groups, from files or the synthetic generator."""
    if cfg.synthetic:
        windows = synthetic_windows(cfg.synth, cfg.data.synth_seed)
        groups = cfg.synth.groups()
    else:
        if not cfg.data.schema:
            raise ConfigError("data.schema is required when data.path is set")
        schema = Schema.from_file(cfg.data.schema)
        recs = load_recordings(cfg.data.path, schema)
        windows = zscore_per_user(windows_from_recordings(recs, cfg.data.window_len, cfg.data.overlap))
        groups = schema.groups
    if cfg.data.groups:
        groups = parse_groups(cfg.data.groups)
    if not groups:
        raise ConfigError("no LOGO groups: set data.groups or a schema groups line")
    return windows, groups


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def write_manifest(out: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    lines = [f"# command: {command}\n", cfg.to_text()]
    lines += [f"# {k} = {v}\n" for k, v in (extra or {}).items()]
    (out / "manifest.cfg").write_text("".join(lines))


def write_transfer(out: Path, cfg: RunConfig, rec: TransferRecord) -> None:
    name = report_filename(cfg.data.name, rec.optimizer, rec.tokens, rec.heldout, rec.seed)
    rows = rec.result.per_class_rows()
    write_csv(out / name, ["class", "correct", "total", "recall", "precision", "f1"], rows)
    summary = ExperimentReport.from_records([rec], {"seed": rec.seed}).summary_text()
    (out / (name[:-4] + "_summary.txt")).write_text(summary)
    write_csv(out / "trace.csv", ["optimizer", "heldout", "seed", "epoch", "accuracy"],
              [{"optimizer": rec.optimizer, "heldout": rec.heldout, "seed": rec.seed, "epoch": e, "accuracy": a}
               for e, a in rec.trace])


def checkpoint_arrays(state) -> dict[str, np.ndarray]:
    arrays = state.policy.state_dict()
    arrays["proj.w"] = state.proj.W.copy()
    if state.value is not None:
        arrays.update(state.value.state_dict())
    return arrays


def _output_dir(cfg: RunConfig) -> Path:
    out = cfg.output.resolve()
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -----------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    windows, groups = load_dataset(cfg)
    plan = SplitPlan(groups, cfg.data.holdout)
    out = _output_dir(cfg)
    write_manifest(out, cfg, "train")
    settings = settings_from(cfg)
    every = cfg.train.checkpoint_interval
    metrics, rewards, timing = [], [], []

    def on_epoch(m, state):
        metrics.append({"optimizer": settings.optimizer, **m})
        rewards.extend({"optimizer": settings.optimizer, **b} for b in m["breakdowns"])
        timing.append({"epoch": m["epoch"], "wall_ms": m["wall_ms"]})
        if every and m["epoch"] % every == 0:
            dc.save_checkpoint(out / f"checkpoint_epoch{m['epoch']}.ctfg", checkpoint_arrays(state))

    rec = run_transfer(windows, plan, settings, cfg.train.seed, on_epoch=on_epoch)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, metrics)
    write_csv(out / "rewards.csv", REWARD_COLUMNS, rewards)
    write_csv(out / "timing.csv", ["epoch", "wall_ms"], timing)
    dc.save_checkpoint(out / "checkpoint.ctfg", checkpoint_arrays(rec.state))
    write_transfer(out, cfg, rec)
    print(f"heldout {rec.heldout}: accuracy {rec.accuracy:.4f} ({out})")
    return 0


def cmd_sweep(cfg: RunConfig, tokens: list[int], optimizers: list[str], seeds: list[int],
              holdouts: list[str], jobs: int = 1) -> int:
    windows, groups = load_dataset(cfg)
    plans = [SplitPlan(groups, h) for h in holdouts]
    out = _output_dir(cfg)
    write_manifest(out, cfg, "sweep", {"tokens": tokens, "optimizers": optimizers, "seeds": seeds,
                                       "holdouts": holdouts})
    reports = sweep_tokens(windows, plans, tokens, optimizers, seeds, settings_from(cfg), jobs=jobs)
    write_csv(out / "sweep.csv", ["tokens", "optimizer", "runs", "mean_accuracy", "std_accuracy"],
              [{"tokens": r.tokens, "optimizer": r.optimizer, "runs": len(r.runs), "mean_accuracy": r.mean,
                "std_accuracy": r.std} for r in reports])
    write_csv(out / "sweep_runs.csv", ["tokens", "optimizer", "heldout", "seed", "accuracy"],
              [{"tokens": r.tokens, "optimizer": r.optimizer, "heldout": h, "seed": s, "accuracy": a}
               for r in reports for h, s, a in r.runs])
    (out / "sweep_summary.txt").write_text("\n".join(r.summary_text() for r in reports))
    for r in reports:
        print(f"s={r.tokens:<3} {r.optimizer:<4} mean {r.mean:.4f} std {r.std:.4f}")
    return 0


def cmd_compare(cfg: RunConfig, seeds: list[int], holdouts: list[str] | None, jobs: int = 1) -> int:
    windows, groups = load_dataset(cfg)
    holdouts = holdouts or list(groups)
    out = _output_dir(cfg)
    write_manifest(out, cfg, "compare", {"holdouts": holdouts, "seeds.grpo": seeds, "seeds.ppo": seeds})
    base = settings_from(cfg)
    optimizers = ("grpo", "ppo")
    tasks = [(windows, SplitPlan(groups, h), base.with_tokens(base.grpo.tokens, opt), seed)
             for opt in optimizers for h in holdouts for seed in seeds]
    rows = []
    for rec in run_many(tasks, jobs):
        trace = dict(rec.trace)
        write_csv(out / f"trace_{rec.optimizer}_{rec.heldout}_{rec.seed}.csv", ["epoch", "mean_reward", "accuracy"],
                  [{"epoch": m["epoch"], "mean_reward": m["mean_reward"], "accuracy": trace.get(m["epoch"])}
                   for m in rec.metrics])
        rows.append({"optimizer": rec.optimizer, "heldout": rec.heldout, "seed": rec.seed, "accuracy": rec.accuracy})
    summary = []
    for opt in optimizers:
        accs = [r["accuracy"] for r in rows if r["optimizer"] == opt]
        summary.append({"optimizer": opt, "transfers": len(accs), "mean_accuracy": float(np.mean(accs)),
                        "std_accuracy": population_std(accs)})
        print(f"{opt}: mean {summary[-1]['mean_accuracy']:.4f} inter-task std {summary[-1]['std_accuracy']:.4f}")
    write_csv(out / "compare_runs.csv", ["optimizer", "heldout", "seed", "accuracy"], rows)
    write_csv(out / "compare_summary.csv", ["optimizer", "transfers", "mean_accuracy", "std_accuracy"], summary)
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    spec = cfg.synth
    out = _output_dir(cfg)
    recs = make_synthetic(spec, np.random.default_rng(cfg.data.synth_seed))
    channels = [f"ch{i + 1}" for i in range(spec.n_channels)]
    for rec in recs:
        label = int(rec.labels[0])
        with open(out / f"user{rec.user_id}_class{label}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*channels, "label", "user"])
            for row, lab in zip(rec.samples, rec.labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab), rec.user_id])
    schema = Schema(channels, "label", "user", spec.sample_rate, ",", spec.groups())
    (out / "schema.cfg").write_text(schema.to_text())
    write_manifest(out, cfg, "synth")
    print(f"wrote {len(recs)} recordings to {out}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: Path) -> int:
    windows, groups = load_dataset(cfg)
    plan = SplitPlan(groups, cfg.data.holdout)
    policy = Policy.from_state(dc.load_checkpoint(checkpoint), cfg.model.encoder())
    source, target = split_logo(windows, plan)
    s = policy.tokens
    model = fit_logreg(policy.extract_features(source.x, s), source.y, l2=cfg.train.l2)
    res = evaluate(model, policy.extract_features(target.x, s), target.y)
    out = _output_dir(cfg)
    write_csv(out / f"eval_{cfg.data.name}_{plan.heldout}.csv",
              ["class", "correct", "total", "recall", "precision", "f1"], res.per_class_rows())
    print(f"heldout {plan.heldout}: accuracy {res.accuracy:.4f}")
    return 0


# --- argument parsing ---------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _str_list(text: str) -> list[str]:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _optimizer_list(text: str) -> list[str]:
    vals = _str_list(text)
    bad = [v for v in vals if v not in ("grpo", "ppo")]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown optimizer(s) {bad}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctfg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration")
    common.add_argument("--seed", type=int, help="alias of train.seed")
    common.add_argument("--holdout", help="alias of data.holdout")
    common.add_argument("--synthetic", action="store_true", help="use the synthetic task (ignores data.path)")
    common.add_argument("--out", help="alias of output.dir")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    for key, value in RunConfig().keys().items():
        common.add_argument(f"--{key}", dest=f"set:{key}", metavar=type(value).__name__.upper())

    sub.add_parser("train", parents=[common], help="train on one LOGO transfer")
    p = sub.add_parser("sweep", parents=[common], help="token-count sweep")
    p.add_argument("--tokens", type=_int_list, default=[5, 10, 15, 20])
    p.add_argument("--optimizers", type=_optimizer_list, default=["grpo", "ppo"])
    p.add_argument("--seeds", type=_int_list, help="default: train.seed")
    p.add_argument("--holdouts", type=_str_list, help="default: data.holdout")
    p = sub.add_parser("compare", parents=[common], help="GRPO vs PPO on identical seeds and transfers")
    p.add_argument("--seeds", type=_int_list, help="default: train.seed")
    p.add_argument("--holdouts", type=_str_list, help="default: every group")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and schema")
    p.add_argument("--noise", type=float, help="alias of synth.noise")
    p = sub.add_parser("eval", parents=[common], help="classify with a saved checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:") and v is not None}
    aliases = {"seed": "train.seed", "holdout": "data.holdout", "out": "output.dir", "noise": "synth.noise"}
    for flag, key in aliases.items():
        if getattr(args, flag, None) is not None:
            overrides[key] = str(getattr(args, flag))
    if args.synthetic:
        overrides["data.path"] = ""
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    try:
        cfg = resolve_config(args)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except (ConfigError, UsageError) as e:
        print(f"ctfg: error: {e}", file=sys.stderr)
        return 2
    try:
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.tokens, args.optimizers, args.seeds or [cfg.train.seed],
                             args.holdouts or [cfg.data.holdout], args.jobs)
        if args.command == "compare":
            return cmd_compare(cfg, args.seeds or [cfg.train.seed], args.holdouts, args.jobs)
        if args.command == "synth":
            return cmd_synth(cfg)
        return cmd_eval(cfg, args.checkpoint)
    except ConfigError as e:
        print(f"ctfg: error: {e}", file=sys.stderr)
        return 2
    except (DataError, ValueError, OSError, FloatingPointError, dc.GraphError) as e:
        print(f"ctfg: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
