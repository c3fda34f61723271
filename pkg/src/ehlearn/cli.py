"""Command-line entry point.

Subcommands mirror the harness phases: ``train`` builds a knowledge
base, ``test`` evaluates all methods against a saved snapshot,
``run-all`` does both in one go, ``report`` regenerates summary and
plot files from an output directory.

``EHLEARN_OUT`` and ``EHLEARN_THREADS`` override the output directory
and thread count (they win over flags, so a wrapper script can redirect
a run without editing its arguments).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import harness
from .exceptions import EHLearnError

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the config's master seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker processes for the test phase (default 1)")
    common.add_argument("--verbose", action="store_true",
                        help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="ehlearn",
        description="Lifelong policy-gradient experiments for "
                    "energy-harvesting sensor pairs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common],
                             help="train the knowledge base on a task stream")
    p_train.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p_train.add_argument("--out", help="output directory")

    p_test = sub.add_parser("test", parents=[common],
                            help="evaluate all methods against a saved snapshot")
    p_test.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p_test.add_argument("--kb", required=True, help="knowledge-base snapshot file")
    p_test.add_argument("--out", help="output directory")

    p_all = sub.add_parser("run-all", parents=[common],
                           help="train then test in one run")
    p_all.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p_all.add_argument("--out", help="output directory")

    p_report = sub.add_parser("report", parents=[common],
                              help="recompute summary and plot CSVs from a run directory")
    p_report.add_argument("--in", dest="in_dir", required=True,
                          help="existing output directory")
    return parser


def _load_config(args) -> harness.ExperimentConfig:
    if getattr(args, "config", None):
        config = harness.load_experiment_config(args.config)
    else:
        config = harness.default_experiment_config()
    if args.seed is not None:
        import dataclasses
        config = dataclasses.replace(config, master_seed=args.seed)
    return config


def _resolve_out(args, config) -> str:
    env = os.environ.get(harness.OUT_DIR_ENV)
    if env:
        return env
    if getattr(args, "out", None):
        return args.out
    return config.out_dir


def _resolve_threads(args) -> int:
    env = os.environ.get(harness.THREADS_ENV)
    if env:
        try:
            threads = int(env)
        except ValueError:
            raise ValueError(f"{harness.THREADS_ENV} must be an integer, got {env!r}")
    elif args.threads is not None:
        threads = args.threads
    else:
        threads = 1
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            summary = harness.report(args.in_dir)
            agg = summary["aggregate"]
            print(f"report written: {os.path.join(args.in_dir, harness.SUMMARY_FILE)} "
                  f"({agg['n_records']} runs, {agg['n_failures']} failures)")
            return 0

        config = _load_config(args)
        out_dir = _resolve_out(args, config)
        threads = _resolve_threads(args)
        if args.command == "train":
            result = harness.run_training_to_dir(config, out_dir,
                                                 verbose=args.verbose)
            print(f"trained on {result.kb.tasks_seen} tasks; snapshot: "
                  f"{os.path.join(out_dir, harness.KB_FILE)}")
        elif args.command == "test":
            result = harness.run_testing(config, args.kb, out_dir,
                                         threads=threads, verbose=args.verbose)
            print(f"test phase done: {len(result.records)} runs, "
                  f"{len(result.failures)} failures; summary: "
                  f"{os.path.join(out_dir, harness.SUMMARY_FILE)}")
        elif args.command == "run-all":
            result = harness.run_experiment(config, out_dir, threads=threads,
                                            verbose=args.verbose)
            print(f"run complete: {len(result.records)} runs, "
                  f"{len(result.failures)} failures; summary: "
                  f"{os.path.join(out_dir, harness.SUMMARY_FILE)}")
        return 0
    except (EHLearnError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
