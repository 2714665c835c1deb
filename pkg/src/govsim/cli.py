"""Command-line entry point: ``govsim run`` and ``govsim validate``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import errors
from .scenario import parse_scenario, render_json, render_text, run_scenario

EXIT_PARSE = 3


def _load(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise errors.ScenarioError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_scenario(text)


def _parse_error(exc: errors.ScenarioError) -> int:
    print(f"error: {exc.code}: {exc}", file=sys.stderr)
    return EXIT_PARSE


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = _load(args.file)
    except errors.ScenarioError as exc:
        return _parse_error(exc)
    seed = args.seed
    env = os.environ.get("GOVSIM_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            print(f"error: GOVSIM_SEED must be an integer, got {env!r}", file=sys.stderr)
            return EXIT_PARSE
    report = run_scenario(scenario, seed)
    rendered = render_text(report) if args.format == "text" else render_json(report)
    if args.report:
        Path(args.report).write_text(render_json(report))
    sys.stdout.write(rendered)
    return report["exit_status"]


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        scenario = _load(args.file)
    except errors.ScenarioError as exc:
        return _parse_error(exc)
    print(f"ok: {scenario.name} ({len(scenario.actions)} actions, "
          f"{len(scenario.assertions)} assertions)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="govsim", description="Blockchain governance simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a scenario and print its report")
    run.add_argument("file")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--report", help="also write the JSON report to this path")
    run.add_argument("--format", choices=("json", "text"), default="json")
    run.set_defaults(func=cmd_run)
    val = sub.add_parser("validate", help="parse and validate a scenario without running it")
    val.add_argument("file")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
