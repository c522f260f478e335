"""Command-line entry point: run, validate, compare and list bundled scenarios."""
from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .scenario import ScenarioError, compare, list_scenarios, run, validate


def _cmd_run(args) -> int:
    summary, man = run(args.scenario, out=args.out, seed=args.seed, stage=args.stage, fmt=args.format)
    print(json.dumps(summary["metrics"], indent=2, sort_keys=True))
    print(f"wrote {', '.join(man.outputs)} + manifest.json (scenario hash {man.scenario_hash}, seed {man.seed})")
    return 0


def _cmd_validate(args) -> int:
    findings = validate(args.scenario)
    for f in findings:
        print(f"- {f}")
    if not findings:
        print("ok")
    return 1 if findings else 0


def _cmd_compare(args) -> int:
    table = compare(args.run_a, args.run_b, args.metric)
    if args.format == "json":
        print(json.dumps(table, indent=2))
        return 0
    print(f"{'metric':48s} {'a':>14s} {'b':>14s} {'delta':>14s} {'ratio':>10s}")
    for row in table:
        print(f"{row['metric']:48s} {row['a']:14.6g} {row['b']:14.6g} {row['delta']:14.6g} {row['ratio']:10.4g}")
    return 0


def _cmd_list(args) -> int:
    for name in list_scenarios():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thermomag", description="Thermo-magnetic NV frequency control simulations")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="execute a scenario file or bundled scenario name")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int, default=None, help="override the scenario master seed")
    r.add_argument("--out", default=None, help="output directory (default runs/<name>)")
    r.add_argument("--stage", default=None, choices=["none", "pid", "pid+ff_p", "pid+ff_pd"],
                   help="run a single ladder stage")
    r.add_argument("--format", default="csv", choices=["csv", "json"])
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("validate", help="check a scenario without running it")
    v.add_argument("scenario")
    v.set_defaults(func=_cmd_validate)

    c = sub.add_parser("compare", help="diff the summaries of two runs")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--metric", action="append", default=None, help="restrict to metric (repeatable)")
    c.add_argument("--format", default="csv", choices=["csv", "json"])
    c.set_defaults(func=_cmd_compare)

    ls = sub.add_parser("list-scenarios", help="print bundled scenario names")
    ls.set_defaults(func=_cmd_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
