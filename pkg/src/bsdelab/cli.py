"""Command-line interface.

Subcommands: ``run <config>``, ``catalog list``, ``catalog run <id>`` and
``report <path> --format ...``.  Exit codes: 0 pass, 2 expectation failure,
64 usage error.
"""

from __future__ import annotations

import argparse
import pathlib
import sys

import yaml

from . import catalog as cat
from .errors import BsdeLabError, UsageError
from .harness import (FORMATS, emit_report, render_records, run_catalog_entry,
                      run_scenario, to_table)

EXIT_OK = 0
EXIT_EXPECTATION = 2
EXIT_USAGE = 64


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsdelab",
        description="scenario runner for the weighted-norm BSDE laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario config file")
    run.add_argument("config", help="YAML scenario configuration")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--format", default="structured-records", choices=FORMATS)
    run.add_argument("--jobs", type=int, default=None,
                     help="worker cap (default: BSDELAB_JOBS or 1)")

    catalog = sub.add_parser("catalog", help="inspect or run catalog entries")
    catalog_sub = catalog.add_subparsers(dest="catalog_command", required=True)
    catalog_sub.add_parser("list", help="list catalog entries")
    crun = catalog_sub.add_parser("run", help="run a catalog entry")
    crun.add_argument("entry_id")
    crun.add_argument("--out", required=True)
    crun.add_argument("--profile", default="full", choices=("full", "smoke"))
    crun.add_argument("--seed", type=int, default=20240810)
    crun.add_argument("--format", default="structured-records", choices=FORMATS)
    crun.add_argument("--jobs", type=int, default=None)

    report = sub.add_parser("report", help="re-render a structured-records file")
    report.add_argument("path")
    report.add_argument("--format", default="table-text", choices=FORMATS)
    report.add_argument("--out", default=None,
                        help="write to this directory instead of stdout")
    return parser


def _load_config(path: str) -> dict:
    p = pathlib.Path(path)
    if not p.exists():
        raise UsageError(f"config file {path!r} does not exist")
    try:
        loaded = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse {path!r}: {exc}")
    if not isinstance(loaded, dict):
        raise UsageError(f"config {path!r} must be a mapping")
    return loaded


def _finish(report, fmt, out_dir) -> int:
    path = emit_report(report, fmt, out_dir)
    print(to_table(report), end="")
    print(f"report written to {path}", file=sys.stderr)
    print(f"wall time {report.wall_time:.2f} s", file=sys.stderr)
    return EXIT_EXPECTATION if report.failed else EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        if args.command == "run":
            report = run_scenario(_load_config(args.config), jobs=args.jobs)
            return _finish(report, args.format, args.out)
        if args.command == "catalog":
            if args.catalog_command == "list":
                for entry_id in cat.catalog_ids():
                    entry = cat.get_entry(entry_id)
                    print(f"{entry_id:<32} {entry.kind:<22} {entry.description}")
                return EXIT_OK
            report = run_catalog_entry(args.entry_id, args.profile, args.seed,
                                       jobs=args.jobs)
            return _finish(report, args.format, args.out)
        if args.command == "report":
            p = pathlib.Path(args.path)
            if not p.exists():
                raise UsageError(f"records file {args.path!r} does not exist")
            rendered = render_records(p.read_text(), args.format)
            if args.out:
                out = pathlib.Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                suffix = {"structured-records": "json", "csv": "csv",
                          "table-text": "txt"}[args.format]
                target = out / (p.stem + "." + suffix)
                target.write_text(rendered)
                print(f"written {target}", file=sys.stderr)
            else:
                print(rendered, end="")
            return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BsdeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXPECTATION
    parser.error("unknown command")
    return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
