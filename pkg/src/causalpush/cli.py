"""Command line entry point: ``causalpush {train,eval,suite,transfer}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness, rewards, sim2d
from .checkpoint import CheckpointError


def _progress(row):
    print(
        f"iter {row['iteration']:>5}  success {row['success_rate']:.3f}  "
        f"reward {row['mean_total_reward']:.4g}  cai {row['mean_cai']:.3g}  "
        f"dyn_mse {row['dynamics_heldout_mse']:.3g}  lr {row['lr']:.2g}",
        flush=True,
    )


def _overrides(args):
    out = {}
    for key in ("iterations", "num_envs", "eval_every", "eval_episodes"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    return out


def cmd_train(args):
    cfg = harness.read_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg = cfg.with_run(**_overrides(args))
    out = args.out or cfg.run.output_dir
    res = harness.train(cfg, out, progress=None if args.quiet else _progress)
    print(f"final success rate {res.rows[-1]['success_rate']:.3f}; run written to {res.out_dir}")
    return 0


def cmd_eval(args):
    rate = harness.evaluate_checkpoint(args.checkpoint, args.episodes, args.seed)
    print(f"success_rate {rate:.4f}")
    return 0


def cmd_suite(args):
    base = harness.read_config(args.config) if args.config else None
    harness.run_suite(args.tasks, args.modes, args.seeds, root=args.out, base=base,
                      overrides=_overrides(args), progress=None if args.quiet else _progress)
    print(f"suite written to {args.out}")
    return 0


def cmd_transfer(args):
    cfg = harness.read_config(args.config).with_run(**_overrides(args))
    summary = harness.transfer_run(args.residual, cfg, seeds=args.seeds, root=args.out,
                                   threshold=args.threshold, progress=None if args.quiet else _progress)
    print(json.dumps(summary["median_iterations_to_threshold"]))
    return 0


def _add_run_overrides(p):
    p.add_argument("--iterations", type=int)
    p.add_argument("--num-envs", dest="num_envs", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    p.add_argument("--quiet", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="causalpush", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _add_run_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("suite", help="train a task x mode x seed grid and plot per-task curves")
    p.add_argument("--tasks", nargs="+", default=["single_object"], choices=[t for t in sim2d.TASKS if t != "custom"])
    p.add_argument("--modes", nargs="+", default=list(rewards.MODES), choices=rewards.MODES)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--config", help="base config; scene task and reward mode are replaced per cell")
    p.add_argument("--out", default="runs/suite")
    _add_run_overrides(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("transfer", help="fine-tune a pretrained residual next to a from-scratch control")
    p.add_argument("--residual", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--out", default="runs/transfer")
    p.add_argument("--threshold", type=float, default=0.5)
    _add_run_overrides(p)
    p.set_defaults(func=cmd_transfer)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except harness.TrainingFault as exc:
        print(f"training halted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
