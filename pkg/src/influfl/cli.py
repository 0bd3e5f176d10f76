"""Command line entry point: ``influfl run | sweep-gamma | compare``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import report
from .config import parse_config
from .errors import ConfigError, UsageError
from .orchestration import run_experiment

OUT_ENV = "INFLUFL_OUT"
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _name_list(text):
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="influfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per round")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON config file")
    common.add_argument("--out", help=f"output root (overrides ${OUT_ENV} and the config)")
    common.add_argument("--gamma", type=float)
    common.add_argument("--rounds", type=int)
    common.add_argument("--seeds", type=_int_list, help="comma-separated seeds for batteries")
    common.add_argument("--threads", type=int)
    common.add_argument("--activation", choices=["tanh", "relu"])
    common.add_argument("--literal-eq10", action="store_true", default=None,
                        help="aggregate each class row with the client's own row (a no-op)")
    common.add_argument("--reset-optimizer", action="store_true", default=None,
                        help="zero the Adam moments at the start of every round")
    common.add_argument("--holdout", action="store_true", default=None,
                        help="train on the 80%% fit split and evaluate on the validation split")

    run = sub.add_parser("run", parents=[common], help="run one method")
    run.add_argument("--method")
    run.add_argument("--seed", type=int, help="run a single seed instead of the seed battery")
    run.add_argument("--checkpoint", action="store_true", help="write per-round checkpoints")
    run.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    sweep = sub.add_parser("sweep-gamma", parents=[common], help="battery per gamma value")
    sweep.add_argument("--method")
    sweep.add_argument("--values", type=_float_list, default=list(report.DEFAULT_GAMMA_SWEEP))

    comp = sub.add_parser("compare", parents=[common], help="battery per method")
    comp.add_argument("--methods", type=_name_list,
                      default=["local", "fedavg", "fedprox", "fedc2i"])
    return parser


def load_config(args):
    overrides = {
        "method": getattr(args, "method", None),
        "gamma": args.gamma,
        "rounds": args.rounds,
        "threads": args.threads,
        "activation": args.activation,
        "literal_eq10": args.literal_eq10,
        "reset_optimizer": args.reset_optimizer,
        "holdout": args.holdout,
    }
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    out = args.out or os.environ.get(OUT_ENV)
    if out:
        overrides["out_dir"] = out
    return parse_config(args.config, overrides)


def _report_battery(rep, out=sys.stdout):
    print(report.render_table("method", [(rep.method, rep)]), file=out)
    for seed, message in rep.failures.items():
        print(f"seed {seed} failed: {message}", file=sys.stderr)
    return EXIT_FAILED if rep.partial else EXIT_OK


def cmd_run(args, config):
    if args.seed is None:
        if args.checkpoint or args.resume:
            raise UsageError("--checkpoint/--resume need a single --seed")
        return _report_battery(report.run_battery(config))
    target = report.run_dir(config.out_dir, config.method, args.seed)
    ckpt = target / "checkpoints" if (args.checkpoint or args.resume or config.checkpoint) else None
    result = run_experiment(config, seed=args.seed, checkpoint_dir=ckpt, resume=args.resume)
    path = report.write_run(result, config.out_dir)
    final = result.final_accuracy()
    print(f"{config.method} seed {args.seed}: mean test accuracy {100 * final.mean():.2f} -> {path}")
    return EXIT_OK


def cmd_sweep(args, config):
    reports = report.sweep_gamma(config, args.values)
    print(report.render_table("gamma", reports))
    return EXIT_FAILED if any(r.partial for _, r in reports) else EXIT_OK


def cmd_compare(args, config):
    reports = report.compare(config, args.methods)
    print(report.render_table("method", reports))
    return EXIT_FAILED if any(r.partial for _, r in reports) else EXIT_OK


COMMANDS = {"run": cmd_run, "sweep-gamma": cmd_sweep, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except (ConfigError, UsageError) as exc:
        print(f"influfl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"influfl: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
