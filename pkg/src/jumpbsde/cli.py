"""Command line entry point: ``jumpbsde price`` and ``jumpbsde converge``.

On failure the process exits nonzero, prints one line
``error\t<ErrorType>\t<reason>`` on stdout and the details on stderr.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from .config import parse_config
from .errors import ConfigError, JumpBsdeError
from .experiment import convergence_study, format_csv, format_json, run_experiment

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _int_list(text: str) -> list:
    try:
        return [int(float(v)) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpbsde", description="BSDE pricing under equivalent measures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("price", help="price one configured experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--measure", action="append", help="P, Q, gop or numeraire:<i>; repeatable")
    p.add_argument("--out", help="CSV output file (default: stdout)")
    p.add_argument("--report", help="JSON report with pairwise gaps and Picard histories")
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column")

    c = sub.add_parser("converge", help="tabulate prices over path and step counts")
    c.add_argument("--config", required=True)
    c.add_argument("--paths-list", type=_int_list, required=True)
    c.add_argument("--steps-list", type=_int_list, required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.add_argument("--timing", action="store_true")
    return parser


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_bytes(text.encode())
    else:
        sys.stdout.write(text)


def _run(args) -> None:
    cfg = parse_config(args.config)
    if args.command == "price":
        cfg = cfg.with_overrides(n_paths=args.paths, n_steps=args.steps, seed=args.seed, measures=args.measure)
        report = run_experiment(cfg)
        _emit(format_csv(report.results, args.timing), args.out)
        if args.report:
            Path(args.report).write_text(format_json(report))
    else:
        cfg = cfg.with_overrides(seed=args.seed)
        rows = convergence_study(cfg, args.paths_list, args.steps_list)
        _emit(format_csv(rows, args.timing), args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except ConfigError as exc:
        print(f"error\tConfigError\t{len(exc.problems)} problem(s)")
        for p in exc.problems:
            print(p, file=sys.stderr)
        return EXIT_CONFIG
    except (JumpBsdeError, ValueError, OSError, KeyError) as exc:
        reason = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error\t{type(exc).__name__}\t{reason}")
        traceback.print_exc(file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
