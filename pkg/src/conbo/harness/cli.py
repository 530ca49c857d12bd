"""Command line: ``run``, ``oracle`` and ``report``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..gp import ModelError
from ..problems import build_oracle, make_problem
from .config import ConfigError, load_config
from .experiment import EvaluationError, ExperimentFailure, MissingOracleError, run_experiment
from .report import collect, summarize, write_summary

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parser():
    p = _Parser(prog="conbo", description="Conditional Bayesian optimization experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--jobs", type=int, default=1, help="replications run in parallel")

    orc = sub.add_parser("oracle", help="precompute a per-state oracle table")
    orc.add_argument("--problem", required=True)
    orc.add_argument("--width", type=float, default=1.0)
    orc.add_argument("--density", default="uniform")
    orc.add_argument("--grid", type=int, required=True, help="quantile levels per state dimension")
    orc.add_argument("--reps", type=int, default=1000, help="simulator replications per estimate")
    orc.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="summarize run files")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--out", required=True)
    return p


def _run(args):
    cfg = load_config(args.config)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    records = run_experiment(cfg, args.out, jobs=args.jobs)
    out = Path(args.out or cfg.output_dir) / f"{cfg.run_name}.csv"
    print(f"wrote {len(records)} records to {out}")


def _oracle(args):
    params = {}
    if args.problem in ("branin", "rosenbrock"):
        params = {"width": args.width, "density": args.density}
    try:
        problem = make_problem(args.problem, **params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.grid < 1:
        raise ConfigError("--grid must be >= 1")
    table = build_oracle(problem, problem.test_states(args.grid), reps=args.reps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write(out)
    print(f"wrote {len(table)} oracle rows to {out}")


def _report(args):
    try:
        records = collect(args.in_dir)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    rows = summarize(records)
    write_summary(rows, args.out)
    print(f"wrote {len(rows)} summary rows to {args.out}")


def cli_main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = {"run": _run, "oracle": _oracle, "report": _report}[args.command]
    try:
        handler(args)
    except (ConfigError, MissingOracleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ExperimentFailure, ModelError, EvaluationError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(cli_main())
