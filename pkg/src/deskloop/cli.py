"""Command-line entry point: ``deskloop run|suite|replay|analyze|validate-world``.

Exit codes: 0 on completion, 1 on configuration or input errors, 2 when a
suite finished with aborted tasks or a replay diverged.

Settings are resolved in this order (later wins): built-in defaults, the
``--config`` file, command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, EmptyInputError, WorldLoadError
from .metrics import compute, emit_report, load_rows
from .orchestrator import RunConfig
from .sim import SimDesktop, load_world
from .suite import (
    SuiteTask,
    find_task,
    load_config,
    load_manifest,
    replay,
    run_suite,
    run_suite_task,
    shipped_manifest,
    with_overrides,
)

logger = logging.getLogger("deskloop")

ABLATIONS = {
    "no_verifier": "verifier",
    "no_loop_breaker": "loop_breaker",
    "no_search": "search",
    "no_coder": "coder",
}

EXIT_OK, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (sections: run, loop, verifier, backends, suite)")
    p.add_argument("--steps", type=_positive, help="step budget per task (e.g. 15, 50 or 100)")
    p.add_argument("--no-verifier", action="store_true", help="accept done() without the completion judge")
    p.add_argument("--no-loop-breaker", action="store_true", help="disable repetition counters and directives")
    p.add_argument("--no-search", action="store_true", help="disable the search agent")
    p.add_argument("--no-coder", action="store_true", help="disable the code agent")
    p.add_argument("--tau-a", type=int, help="action-repeat threshold (default 2)")
    p.add_argument("--tau-o", type=int, help="screen-repeat threshold (default 3)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskloop", description="Run desktop-agent tasks and suites, replay logs and compute trajectory metrics.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one task")
    p.add_argument("--world", required=True, help="world file, shipped world name or manifest task id")
    p.add_argument("--script", help="script file with scripted backend responses")
    p.add_argument("--instruction", help="task instruction (defaults to the manifest entry)")
    p.add_argument("--task-id", help="task id used for the log directory")
    p.add_argument("--manifest", help="manifest to look the world up in (default: shipped suite)")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    _add_run_flags(p)

    p = sub.add_parser("suite", help="run every task of a manifest")
    p.add_argument("--manifest", help="manifest file (default: the shipped 20-world suite)")
    p.add_argument("--family", action="append", help="only run tasks of this family (repeatable)")
    p.add_argument("--parallel", type=_positive, help="concurrent task runs (default 1)")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--format", choices=("table", "json"), default="table", help="report format on stdout")
    _add_run_flags(p)

    p = sub.add_parser("replay", help="re-run a logged task from its transcript and compare logs")
    p.add_argument("task_dir", help="directory holding trajectory.jsonl and transcript.jsonl")
    p.add_argument("--world", help="world file (default: the one named in the log header)")
    p.add_argument("--steps", type=_positive, help="override the recorded step budget")
    p.add_argument("--tau-a", type=int, help="override the recorded action-repeat threshold")
    p.add_argument("--tau-o", type=int, help="override the recorded screen-repeat threshold")

    p = sub.add_parser("analyze", help="compute metrics over logs or a rows.json fixture")
    p.add_argument("path", help="trajectory file, suite directory or rows.json")
    p.add_argument("--format", choices=("table", "json"), default="json")
    p.add_argument("--out", help="also write the JSON report to this file")
    p.add_argument("--tau-a", type=int, help="action-repeat threshold for loop detection")
    p.add_argument("--tau-o", type=int, help="screen-repeat threshold for loop detection")

    p = sub.add_parser("validate-world", help="check world files against the schema")
    p.add_argument("paths", nargs="+", help="world YAML files")
    return parser


def _run_config(args) -> tuple[RunConfig, object, int]:
    loaded = load_config(args.config)
    disable = [feat for flag, feat in ABLATIONS.items() if getattr(args, flag, False)]
    cfg = with_overrides(loaded.run, args.steps, disable, args.tau_a, args.tau_o)
    return cfg, loaded.profile, loaded.parallel


def cmd_run(args) -> int:
    cfg, profile, _ = _run_config(args)
    world_path = Path(args.world)
    if world_path.suffix in (".yaml", ".yml") and not world_path.is_file():
        raise ConfigError(f"world file {args.world} not found")
    entry: Optional[SuiteTask] = None
    try:
        entry = find_task(world_path.stem if world_path.is_file() else args.world, args.manifest)
    except ConfigError:
        if not world_path.is_file():
            raise
    if entry is None:
        if not (args.script and args.instruction):
            raise ConfigError("a world outside the manifest needs --script and --instruction")
        entry = SuiteTask(args.task_id or world_path.stem, str(world_path), args.instruction, 50,
                          True, "", str(Path(args.script)))
    else:
        entry = SuiteTask(args.task_id or entry.id, str(world_path) if world_path.is_file() else entry.world,
                          args.instruction or entry.instruction, entry.budget, entry.expected_solvable,
                          entry.family, args.script or entry.script, None if args.script else entry.base)
    entry.load_world()  # surface world errors before any output
    res = run_suite_task(entry, cfg, args.out, profile)
    print(json.dumps({**res.summary(), "trajectory": res.trajectory_path}, indent=2, sort_keys=True))
    return EXIT_ABORTED if res.termination.kind == "aborted" else EXIT_OK


def cmd_suite(args) -> int:
    cfg, profile, parallel = _run_config(args)
    tasks = load_manifest(args.manifest or shipped_manifest())
    if args.family:
        tasks = [t for t in tasks if t.family in set(args.family)]
    report = run_suite(tasks, cfg, args.out, args.parallel or parallel, profile)
    for r in report.results:
        print(f"{r.task_id:24} {r.termination.kind:17} success={r.env_success!s:5} steps={r.step_count}")
    for tid, err in sorted(report.errors.items()):
        print(f"{tid:24} error: {err}")
    if report.metrics is not None:
        print(emit_report(report.metrics, args.format), end="")
    else:
        print("empty suite: no tasks were run")
    return EXIT_ABORTED if report.aborted else EXIT_OK


def cmd_replay(args) -> int:
    from .core import read_trajectory
    from .suite import config_from_identity

    d = Path(args.task_dir)
    if not (d / "transcript.jsonl").is_file() or not (d / "trajectory.jsonl").is_file():
        raise ConfigError(f"{d} lacks trajectory.jsonl or transcript.jsonl")
    cfg = config_from_identity(read_trajectory(d / "trajectory.jsonl").header["config"])
    cfg = with_overrides(cfg, args.steps, (), args.tau_a, args.tau_o)
    outcome = replay(d, cfg, args.world)
    if outcome.identical:
        print("replay identical")
        return EXIT_OK
    print(f"replay diverged: {outcome.divergence}")
    return EXIT_ABORTED


def cmd_analyze(args) -> int:
    from .loop_breaker import LoopConfig

    p = Path(args.path)
    if not p.exists():
        raise ConfigError(f"{p} does not exist")
    cfg = None
    if args.tau_a is not None or args.tau_o is not None:
        cfg = LoopConfig(tau_a=args.tau_a or 2, tau_o=args.tau_o or 3)
    rows = load_rows(p, cfg)
    report = compute(rows)
    print(emit_report(report, args.format), end="")
    if args.out:
        Path(args.out).write_text(emit_report(report, "json"), encoding="utf-8")
    return EXIT_OK


def cmd_validate_world(args) -> int:
    status = EXIT_OK
    for path in args.paths:
        try:
            world = load_world(path)
            SimDesktop(world).observe(0)
        except WorldLoadError as exc:
            print(f"{path}: invalid at {exc.path}: {exc}")
            status = EXIT_CONFIG
        else:
            print(f"{path}: ok ({len(world.screens)} screens)")
    return status


COMMANDS = {
    "run": cmd_run,
    "suite": cmd_suite,
    "replay": cmd_replay,
    "analyze": cmd_analyze,
    "validate-world": cmd_validate_world,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, WorldLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
