"""Command-line entry point.

Subcommands: gen, split, train (paramserver / aggregate-ls), gp (committee
fit + prediction grid), cluster (kmeans / kwindows / distributed-kwindows),
and report. Every run takes ``--config <json>`` and ``--out <dir>``;
``--seed`` overrides the config's top-level seed.

Exit codes: 0 ok; 2 config/validation error; 3 numerical error
(singular or non-PD system, inconsistent committee); 4 I/O or parse error.
"""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .errors import ConfigError, FactorizationError, ParseError, RankDeficiencyError
from .transport import TransportError

_COMMAND_TASKS = {
    "gen": ("gen",),
    "split": ("split",),
    "train": ("paramserver", "aggregate-ls"),
    "gp": ("gp-committee",),
    "cluster": ("kmeans", "kwindows", "distributed-kwindows"),
}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swaplearn",
        description="Central-server training, exact aggregation, GP committees, "
                    "and window clustering from JSON configs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, tasks in _COMMAND_TASKS.items():
        p = sub.add_parser(name, help=f"run a config with task in {tasks}")
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's top-level seed")
        p.add_argument("--out", required=True, help="output directory")
    rep = sub.add_parser("report", help="format a metrics.jsonl file")
    rep.add_argument("metrics", help="path to metrics.jsonl")
    rep.add_argument("--out", default=None, help="directory for report.csv")
    return parser


def _dispatch(args) -> int:
    if args.command == "report":
        experiments.report(args.metrics, args.out)
        return EXIT_OK
    cfg = experiments.load_config(args.config)
    allowed = _COMMAND_TASKS[args.command]
    if cfg["task"] not in allowed:
        raise ConfigError(
            f"task {cfg['task']!r} does not belong to subcommand "
            f"{args.command!r} (expected one of {', '.join(allowed)})",
            path="task")
    if args.seed is not None:
        cfg["seed"] = args.seed
    summary = experiments.run_experiment(cfg, args.out)
    print(f"ok: task={summary['task']} out={args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RankDeficiencyError, FactorizationError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TransportError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid value: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
