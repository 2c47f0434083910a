"""Command-line entry points: train, compare, sharpness, verify-theory,
schedule-dump."""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .data import load_corpus, sample_windows
from .model import BLOCK_TYPES, load_checkpoint
from .optim import effective_lr, schedule_lr
from .sharpness import block_sharpness, fisher_diag, reports_to_csv
from .theory import theory_suite
from .trainer import compare_runs, load_config, train_run


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train_run(cfg)
    print(f"run complete: {result.out_dir}")
    print(f"terminal train loss {result.terminal_train_loss:.6f}, "
          f"terminal val loss {result.terminal_val_loss:.6f}")
    return 0


def _cmd_compare(args) -> int:
    summary = compare_runs(load_config(args.config_a), load_config(args.config_b))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
        print(f"summary written to {args.out}")
    brief = {k: v for k, v in summary.items() if not isinstance(v, list)}
    print(json.dumps(brief, indent=2))
    return 0


def _cmd_sharpness(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_corpus(args.batch_source, seed=args.seed)
    if ds.vocab_size != model.config.vocab_size:
        raise SystemExit(
            f"corpus vocab ({ds.vocab_size}) does not match checkpoint "
            f"({model.config.vocab_size})"
        )
    rng = np.random.default_rng(args.seed)
    batch = sample_windows(ds.val_ids, args.batch_size, model.config.context + 1, rng)
    h = fisher_diag(model, batch, rng)
    reports = [
        block_sharpness(h, model.registry, grouping, "log", step=0)
        for grouping in ("block_type", "layer")
    ]
    sys.stdout.write(reports_to_csv(reports))
    return 0


def _cmd_verify_theory(args) -> int:
    summary = theory_suite(seed=args.seed, trials=args.trials)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["theorem", "trial", "group", "lhs", "rhs", "slack", "deviation"])
    trial_counter: dict[int, int] = {}
    for rep in summary.reports:
        trial = trial_counter.get(rep.theorem, 0)
        trial_counter[rep.theorem] = trial + 1
        for row in rep.rows:
            writer.writerow([
                rep.theorem, trial, row.group,
                repr(row.lhs), repr(row.rhs),
                repr(row.rhs - row.lhs), repr(row.deviation),
            ])
    print(
        f"# passed: {summary.passed}  max deviation: {summary.max_deviation:.3e}",
        file=sys.stderr,
    )
    return 0


def _cmd_schedule_dump(args) -> int:
    cfg = load_config(args.config)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["step", "lr"] + [f"lr_{bt.value}" for bt in BLOCK_TYPES])
    warmup = cfg.schedule.warmup_steps
    for step in range(cfg.schedule.total_steps + 1):
        base = schedule_lr(cfg.schedule, step)
        effs = [effective_lr(base, bt, cfg.blockwise, step, warmup) for bt in BLOCK_TYPES]
        writer.writerow([step, repr(base)] + [repr(e) for e in effs])
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="blocklab",
        description="Blockwise sharpness measurement and per-block LR training lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compare", help="A/B two configs sharing model/data/seed")
    p.add_argument("--config-a", required=True)
    p.add_argument("--config-b", required=True)
    p.add_argument("--out", default=None, help="write full summary JSON here")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("sharpness", help="measure blockwise sharpness of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-source", required=True, help="corpus file for eval batches")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sharpness)

    p = sub.add_parser("verify-theory", help="run the analytic-gradient bound suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=_cmd_verify_theory)

    p = sub.add_parser("schedule-dump", help="print (step, lr, per-block lr) CSV")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_schedule_dump)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
