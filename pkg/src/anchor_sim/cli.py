"""Command-line interface: batch runs, planning, shell fitting, trace replay."""
from __future__ import annotations

import argparse
import os
import sys

from .core import Point3, RngSeed
from .executive import Ablation, replay_terminal_status
from .harness import report_to_table, run_batch, write_report
from .planner import (EXPORT_DOMAIN, PddlError, parse_domain, parse_problem,
                      plan, plan_to_text, serialize_domain)
from .reachability import (ArmModel, ShellFitConfig, fit_shell, sample_workspace,
                           save_shell)
from .scenario import ScenarioError

EXIT_OK = 0
EXIT_CELL_FAILURE = 1
EXIT_CONFIG_ERROR = 2

_LEVEL_FILES = {1: "level1.scn", 2: "level2.scn", 3: "level3.scn"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchor-sim",
                                     description="Deterministic mobile-manipulation "
                                                 "simulation stack")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a batch of seeded trials")
    run.add_argument("--scenario", required=True,
                     help="scenario file, or a directory holding level{1,2,3}.scn")
    run.add_argument("--level", default="all", choices=["1", "2", "3", "all"])
    run.add_argument("--ablation", default="full",
                     choices=[a.value for a in Ablation] + ["all"])
    run.add_argument("--trials", type=int, default=20)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", default="report.csv")
    run.add_argument("--trace-dir", default=None)

    plan_cmd = sub.add_parser("plan", help="solve a PDDL problem file")
    plan_cmd.add_argument("--problem", required=True)
    plan_cmd.add_argument("--domain", default=None,
                          help="domain file (defaults to the built-in fixed domain)")

    fit = sub.add_parser("fit-shell", help="sample a workspace and fit its shell")
    fit.add_argument("--arm", default="0.30,0.25,0.15",
                     help="link lengths L1,L2,L3 with optional mount x,y,z "
                          "(six comma-separated numbers)")
    fit.add_argument("--resolution", type=float, default=0.05)
    fit.add_argument("--trials", type=int, default=20)
    fit.add_argument("--mu-threshold", type=float, default=0.5)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", required=True)

    replay = sub.add_parser("replay", help="re-derive terminal status from a trace")
    replay.add_argument("--trace", required=True)
    return parser


def _cmd_run(args) -> int:
    levels = [1, 2, 3] if args.level == "all" else [int(args.level)]
    ablations = (list(Ablation) if args.ablation == "all"
                 else [Ablation(args.ablation)])
    if os.path.isdir(args.scenario):
        scenarios = {lvl: os.path.join(args.scenario, _LEVEL_FILES[lvl])
                     for lvl in levels}
        missing = [p for p in scenarios.values() if not os.path.exists(p)]
        if missing:
            print(f"error: missing scenario files: {', '.join(missing)}",
                  file=sys.stderr)
            return EXIT_CONFIG_ERROR
    else:
        if not os.path.exists(args.scenario):
            print(f"error: scenario {args.scenario!r} not found", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        scenarios = {lvl: args.scenario for lvl in levels}
    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if args.trace_dir is not None:
        os.makedirs(args.trace_dir, exist_ok=True)
    try:
        report = run_batch(scenarios, levels, ablations, args.trials, args.seed,
                           trace_dir=args.trace_dir)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    write_report(report, args.out)
    print(report_to_table(report), end="")
    failures = [c for c in report.cells if c.error is not None]
    for cell in failures:
        print(f"cell (level {cell.level}, {cell.ablation}) failed: {cell.error}",
              file=sys.stderr)
    return EXIT_CELL_FAILURE if failures else EXIT_OK


def _cmd_plan(args) -> int:
    try:
        if args.domain is not None:
            with open(args.domain, "r", encoding="utf-8") as fh:
                domain = parse_domain(fh.read())
        else:
            domain = parse_domain(serialize_domain(EXPORT_DOMAIN))
        with open(args.problem, "r", encoding="utf-8") as fh:
            problem = parse_problem(fh.read(), domain)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except PddlError as exc:
        print(f"error: malformed PDDL: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    result = plan(problem)
    if result is None:
        print("no plan: goal unreachable")
        return EXIT_CELL_FAILURE
    print(plan_to_text(result), end="")
    return EXIT_OK


def _cmd_fit_shell(args) -> int:
    try:
        values = [float(v) for v in args.arm.split(",")]
    except ValueError:
        print(f"error: bad --arm value {args.arm!r}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if len(values) == 3:
        arm = ArmModel(link_lengths=tuple(values))
    elif len(values) == 6:
        arm = ArmModel(link_lengths=tuple(values[:3]),
                       mount_offset=Point3(*values[3:]))
    else:
        print("error: --arm needs 3 link lengths or 3 lengths + mount x,y,z",
              file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        cfg = ShellFitConfig(mu_threshold=args.mu_threshold,
                             ik_trials_per_pose=args.trials,
                             sample_grid_resolution=args.resolution)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    samples = sample_workspace(arm, cfg, RngSeed(args.seed))
    shell = fit_shell(samples, cfg, mount=arm.mount_offset)
    save_shell(shell, args.out)
    print(f"shell written to {args.out}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    try:
        with open(args.trace, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        result = replay_terminal_status(text)
    except (ValueError, KeyError) as exc:
        print(f"error: malformed trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    print(f"replayed status: {result['status']} "
          f"(recorded: {result['recorded']}, consistent: {result['consistent']})")
    return EXIT_OK if result["consistent"] else EXIT_CELL_FAILURE


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "plan":
        return _cmd_plan(args)
    if args.command == "fit-shell":
        return _cmd_fit_shell(args)
    if args.command == "replay":
        return _cmd_replay(args)
    return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
