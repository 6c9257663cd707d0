"""Command line entry point: ``delaygame <stage> --scenario s.json``.

Every subcommand loads a scenario, runs one stage (``run`` runs the stages
the scenario lists), prints a short table of checks and writes
``summary.json`` into ``--out-dir`` when given. The exit status is 1 when
any check fails and 2 on invalid input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import hji_solver
from .dynamics import DeclaredConstantError
from .scenario import STAGES, ScenarioError, ScenarioRun, dump_summary, load_scenario, run_scenario


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario JSON file or bundled scenario name")
    common.add_argument("--seed", type=int, default=None, help="override the scenario's Monte Carlo seed")
    common.add_argument("--out-dir", type=Path, default=None, help="directory for CSV/JSON outputs")
    common.add_argument("--paths", type=int, default=None, help="override the number of Monte Carlo paths")
    common.add_argument("--quiet", action="store_true", help="print nothing; rely on the exit status")

    p = argparse.ArgumentParser(prog="delaygame", description="Delayed-strategy stochastic differential games.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "solve-hji":
            sp.add_argument("--kind", choices=hji_solver.KINDS, default=None,
                            help="solve one value only and export it")
            sp.add_argument("--out", type=Path, default=None,
                            help="export path for --kind (.csv, or .bin for the binary dump)")
    sub.add_parser("run", parents=[common], help="run every stage listed in the scenario")
    return p


def _print_summary(summary: dict) -> None:
    width = max([len(c["name"]) for c in summary["checks"]] + [10])
    for c in summary["checks"]:
        flag = "PASS" if c["passed"] else "FAIL"
        val = "" if c["value"] is None else f"  value={c['value']}"
        tol = "" if c["tolerance"] is None else f"  tol={c['tolerance']}"
        print(f"{flag}  {c['name']:<{width}}{val}{tol}")
    print(f"{summary['scenario']}: {'all checks passed' if summary['passed'] else 'some checks FAILED'}")


def _export_one(args) -> int:
    sc = load_scenario(args.scenario)
    runner = ScenarioRun(sc, seed=args.seed)
    vg = runner.value(args.kind)
    out = args.out or Path(f"value_{args.kind}.csv")
    if out.suffix == ".bin":
        vg.to_binary(out)
    else:
        vg.to_csv(out)
    if not args.quiet:
        print(f"wrote {out} ({len(vg.times)} levels x {vg.space.shape} nodes)")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.paths is not None and args.paths < 1:
        print("error: --paths must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.command == "solve-hji" and args.kind is not None:
            return _export_one(args)
        stages = None if args.command == "run" else [args.command]
        summary = run_scenario(args.scenario, seed=args.seed, n_paths=args.paths,
                               out_dir=args.out_dir, stages=stages)
    except (ScenarioError, DeclaredConstantError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        if args.out_dir is None:
            sys.stdout.write(dump_summary(summary))
        _print_summary(summary)
    return 0 if summary["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
