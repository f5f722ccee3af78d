"""Command line entry point: ``robust-sbm {solve,check,compare}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .runner import (COLUMNS, FAMILIES, ConfigError, FamilyAbort, emit_report, load_config,
                     parse_report_json, prepare, report_friedman, run_batch)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3


def _cmd_solve(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.out:
        config = replace(config, output_dir=Path(args.out))
    if args.jobs:
        config = replace(config, parallelism=args.jobs)
    report = run_batch(config)
    for path in emit_report(report, config.output_dir):
        print(f"wrote {path}")
    for fam, cols in report.lowest().items():
        print(f"lowest {fam}: " + ", ".join(f"{c}={cols[c]}" for c in COLUMNS))
    if report.friedman is not None:
        print(report.friedman.summary())
    else:
        print("Friedman: not run (needs two families and two complete DMUs)")
    return EXIT_OK


def _cmd_check(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    prepared = prepare(config)
    panel = prepared.panel
    print(f"panel {config.panel_path}: n={panel.n} m={panel.m} D={panel.D} s1={panel.s1} s2={panel.s2}")
    for note in panel.notes:
        print(f"note: {note}")
    print(f"families: {', '.join(config.ordered_families)}; layers: {prepared.layers.generator}")
    print("config OK")
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    try:
        with open(args.report, encoding="utf-8") as fh:
            report = parse_report_json(fh.read())
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from exc
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    try:
        result = report_friedman(report, families, args.column)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if result is None:
        print("Friedman: not enough families or complete DMUs to compare")
        return EXIT_CONFIG
    print(result.summary())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-sbm", description="Robust two-stage SBM efficiency batches.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve every DMU x family x stage and write report.csv/report.json")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--jobs", type=int, help="override the parallelism degree")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("check", help="validate the configuration and panel without solving")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("compare", help="Friedman rank test over an existing report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--families", default=",".join(FAMILIES), help="comma separated, e.g. crisp,budget")
    p.add_argument("--column", choices=COLUMNS, default="overall")
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FamilyAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
