"""Command line entry point.

Exit codes: 0 every cell done, 2 some cells faulty after retries, 3 invalid
plan or environment.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .model import PlanError, load_plan
from .report import build_table, load_reports, render, render_merged

EXIT_OK, EXIT_FAULTY, EXIT_CONFIG = 0, 2, 3


def _summary(artifacts):
    for a in artifacts:
        attempts = len([h for h in a.state.history if h["outcome"] in ("done", "faulty")])
        print(f"{a.state.phase:7s} {a.cell} (attempts: {attempts})")


def cmd_run(args) -> int:
    from .runner import exit_code, run_plan_file

    artifacts, run_dir = run_plan_file(args.plan, args.run_dir, args.driver)
    _summary(artifacts)
    print(f"results in {run_dir}")
    return exit_code(artifacts)


def cmd_resume(args) -> int:
    from .runner import exit_code, make_driver, resume

    driver = None
    if args.driver:
        plan = load_plan(Path(args.run_dir) / "plan.yaml")
        driver = make_driver(args.driver, plan, args.run_dir)
    artifacts = resume(args.run_dir, driver)
    _summary(artifacts)
    return exit_code(artifacts)


def cmd_validate(args) -> int:
    from .runner import prepare_descriptor, plan_cells

    plan = load_plan(args.plan)
    base = Path(args.plan).resolve().parent
    for v in plan.variants:
        prepare_descriptor(v, base)
    n = sum(1 for _ in plan_cells(plan))
    print(f"plan {plan.name!r} is valid: {len(plan.variants)} variants, {len(plan.workloads)} workloads, "
          f"{n} cells")
    return EXIT_OK


def cmd_report(args) -> int:
    reports, gaps = load_reports(args.run_dir)
    table = build_table(reports)
    if args.merge:
        first, _, second = args.merge.partition(",")
        try:
            sys.stdout.write(render_merged(table, first, second))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    else:
        sys.stdout.write(render(table, args.format))
    if gaps:
        print("missing cells: " + ", ".join(gaps), file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecoharness", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute every cell of a plan")
    r.add_argument("plan")
    r.add_argument("--run-dir", help="output directory (default: <output_dir>/<plan name> next to the plan)")
    r.add_argument("--driver", choices=("sim", "external"), help="override the plan's driver kind")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("resume", help="continue an interrupted run from its journal")
    s.add_argument("run_dir")
    s.add_argument("--driver", choices=("sim", "external"))
    s.set_defaults(fn=cmd_resume)

    v = sub.add_parser("validate", help="check a plan and its descriptors without running")
    v.add_argument("plan")
    v.set_defaults(fn=cmd_validate)

    rep = sub.add_parser("report", help="print the comparison table of a finished run")
    rep.add_argument("run_dir")
    rep.add_argument("--format", choices=("text", "markdown", "csv"), default="text")
    rep.add_argument("--merge", metavar="W1,W2", help="markdown with two workloads side by side per cell")
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (PlanError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
