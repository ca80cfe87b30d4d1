"""Batch harness: manifests, per-task backends, config files and replay.

A manifest lists tasks; each names a world, an instruction, a step budget
and a script file holding the scripted backend responses for that task.
Paths in a manifest are resolved relative to the manifest itself, then
against the shipped worlds/scripts.
"""

from __future__ import annotations

import json
import logging
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .backends import BackendProfile, Gateway, OracleJudgeAdapter, ScriptedAdapter, build_adapter
from .core import FEATURES, TaskSpec, read_trajectory
from .errors import ConfigError, WorldLoadError
from .language import ROLES
from .loop_breaker import LoopConfig
from .metrics import MetricsReport, RunOutcomeRow, compute, detect_loop_segments
from .orchestrator import RunConfig, RunResult, run_task
from .sim import SimDesktop, World, load_world, shipped_worlds_dir
from .verifier import VerifierConfig

logger = logging.getLogger(__name__)

DEFAULT_REFLECTION = {"default": {"reflect": "KEEP"}}


def shipped_scripts_dir() -> Path:
    return Path(str(resources.files("deskloop").joinpath("scripts")))


def shipped_manifest() -> Path:
    return shipped_scripts_dir() / "manifest.yaml"


def _read_yaml(path: Path, what: str) -> Any:
    try:
        return yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{what} {path} is not valid YAML: {exc}") from None


def resolve_path(ref: str, base: Optional[Path], shipped: Path, suffix: str = ".yaml") -> Path:
    """Find ``ref`` as given, next to ``base``, or among the shipped files."""
    candidates = [Path(ref)]
    if base is not None:
        candidates.append(base / ref)
    candidates += [shipped / ref, shipped / f"{ref}{suffix}"]
    for c in candidates:
        if c.is_file():
            return c
    raise ConfigError(f"cannot find {ref!r}")


# -- manifest --------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteTask:
    id: str
    world: str
    instruction: str
    budget: int = 50
    expected_solvable: bool = True
    family: str = ""
    script: str = ""
    base: Optional[Path] = None

    def spec(self) -> TaskSpec:
        return TaskSpec(self.id, self.instruction, self.budget, frozenset(FEATURES), self.family)

    def load_world(self) -> World:
        return load_world(resolve_path(self.world, self.base, shipped_worlds_dir()))

    def load_script(self) -> dict:
        if not self.script:
            return {}
        doc = _read_yaml(resolve_path(self.script, self.base, shipped_scripts_dir()), "script")
        if not isinstance(doc, dict):
            raise ConfigError(f"script {self.script!r} must be a mapping of roles")
        return doc


def load_manifest(path) -> list[SuiteTask]:
    p = Path(path)
    doc = _read_yaml(p, "manifest") or {}
    entries = doc.get("tasks", []) if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise ConfigError("manifest must hold a list of tasks")
    tasks, seen = [], set()
    for i, e in enumerate(entries):
        try:
            t = SuiteTask(str(e["id"]), str(e["world"]), str(e["instruction"]), int(e.get("budget", 50)),
                          bool(e.get("expected_solvable", True)), str(e.get("family", "")),
                          str(e.get("script", "")), p.parent)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"manifest entry {i} lacks {exc}") from None
        if t.id in seen:
            raise ConfigError(f"duplicate task id {t.id!r} in manifest")
        seen.add(t.id)
        tasks.append(t)
    return tasks


def find_task(ref: str, manifest=None) -> SuiteTask:
    """Manifest entry whose id or world name equals ``ref``."""
    for t in load_manifest(manifest or shipped_manifest()):
        if ref in (t.id, t.world, Path(t.world).stem):
            return t
    raise ConfigError(f"no task or world named {ref!r} in the manifest")


# -- backends --------------------------------------------------------------------


def build_gateway(script: dict, env: SimDesktop, profile: Optional[BackendProfile] = None) -> Gateway:
    """Adapters for one task: configured live roles, else the task's script.

    The verifier falls back to the oracle judge over the world's success
    conditions, and reflection to a constant KEEP.
    """
    profile = profile or BackendProfile()
    script = dict(script)
    script.setdefault("reflection", DEFAULT_REFLECTION)
    scripted = ScriptedAdapter(script)
    adapters = {}
    for role in ROLES:
        spec = profile.roles.get(role)
        if spec and spec.get("kind") != "scripted":
            adapters[role] = build_adapter(spec, env.unmet_conditions)
        elif role in script:
            adapters[role] = scripted
        elif role == "verifier":
            adapters[role] = OracleJudgeAdapter(env.unmet_conditions)
    return Gateway(adapters, profile)


def run_suite_task(task: SuiteTask, cfg: RunConfig, out_dir=None,
                   profile: Optional[BackendProfile] = None) -> RunResult:
    env = SimDesktop(task.load_world())
    gw = build_gateway(task.load_script(), env, profile)
    res = run_task(task.spec(), env, gw, cfg, out_dir, world_ref=task.world)
    res.family, res.expected_solvable = task.family, task.expected_solvable
    return res


# -- suite -----------------------------------------------------------------------


@dataclass
class SuiteReport:
    results: list[RunResult] = field(default_factory=list)
    rows: list[RunOutcomeRow] = field(default_factory=list)
    metrics: Optional[MetricsReport] = None
    errors: dict[str, str] = field(default_factory=dict)  # task id -> setup error

    @property
    def aborted(self) -> list[str]:
        return sorted([r.task_id for r in self.results if r.termination.kind == "aborted"] + list(self.errors))

    def to_dict(self) -> dict:
        return {
            "tasks": [{**r.summary(), "family": r.family, "expected_solvable": r.expected_solvable}
                      for r in self.results],
            "errors": dict(sorted(self.errors.items())),
            "metrics": self.metrics.to_dict() if self.metrics else None,
        }


def row_from_result(res: RunResult, loop: LoopConfig) -> RunOutcomeRow:
    return RunOutcomeRow(res.task_id, res.termination.kind, res.claimed_done, bool(res.env_success),
                         tuple(detect_loop_segments(res.steps, loop)), res.step_count, res.family)


def run_suite(tasks: Sequence[SuiteTask], cfg: RunConfig = RunConfig(), out_dir=None, parallel: int = 1,
              profile: Optional[BackendProfile] = None) -> SuiteReport:
    """Run every task; one failing task never stops the others."""
    report = SuiteReport()
    if not tasks:
        return report

    def one(task: SuiteTask):
        try:
            return run_suite_task(task, cfg, out_dir, profile)
        except (ConfigError, WorldLoadError) as exc:
            logger.error("task %s could not start: %s", task.id, exc)
            return str(exc)

    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        outcomes = list(pool.map(one, tasks))
    for task, out in zip(tasks, outcomes):
        if isinstance(out, str):
            report.errors[task.id] = out
        else:
            report.results.append(out)
            report.rows.append(row_from_result(out, cfg.loop))
    if report.rows:
        report.metrics = compute(report.rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


# -- config files ----------------------------------------------------------------


CONFIG_SECTIONS = ("run", "loop", "verifier", "backends", "suite")


@dataclass
class LoadedConfig:
    run: RunConfig = field(default_factory=RunConfig)
    profile: BackendProfile = field(default_factory=BackendProfile)
    parallel: int = 1


def load_config(path=None) -> LoadedConfig:
    """Read a YAML config with one section per module; missing sections keep defaults."""
    if path is None:
        return LoadedConfig()
    doc = _read_yaml(Path(path), "config") or {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        loop = LoopConfig(**(doc.get("loop") or {}))
        vdoc = dict(doc.get("verifier") or {})
        if "uncertainty_phrases" in vdoc:
            vdoc["uncertainty_phrases"] = tuple(vdoc["uncertainty_phrases"])
        verifier = VerifierConfig(**vdoc)
        rdoc = dict(doc.get("run") or {})
        disabled = set(rdoc.pop("disable", []) or [])
        features = frozenset(FEATURES) - disabled
        run = RunConfig(features=features, loop=loop, verifier=verifier, **rdoc)
        bdoc = doc.get("backends") or {}
        profile = BackendProfile(**bdoc)
        parallel = int((doc.get("suite") or {}).get("parallel", 1))
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from None
    return LoadedConfig(run, profile, parallel)


def with_overrides(cfg: RunConfig, budget: Optional[int] = None, disable: Sequence[str] = (),
                   tau_a: Optional[int] = None, tau_o: Optional[int] = None) -> RunConfig:
    """Command-line flags win over file values."""
    loop = cfg.loop
    if tau_a is not None:
        loop = replace(loop, tau_a=tau_a)
    if tau_o is not None:
        loop = replace(loop, tau_o=tau_o)
    return replace(cfg, budget=budget if budget is not None else cfg.budget,
                   features=cfg.features - frozenset(disable), loop=loop)


def config_from_identity(ident: dict) -> RunConfig:
    """Rebuild the run configuration recorded in a trajectory header."""
    v = dict(ident["verifier"])
    v["uncertainty_phrases"] = tuple(v["uncertainty_phrases"])
    return RunConfig(
        features=frozenset(ident["features"]), loop=LoopConfig(**ident["loop"]), verifier=VerifierConfig(**v),
        malformed_retry_cap=ident["malformed_retry_cap"], history_window=ident["history_window"],
        coder_budget=ident["coder_budget"], command_timeout_s=ident["command_timeout_s"],
        network_allowed=ident["network_allowed"], live=ident["live"], platform=ident["platform"],
        seed=ident["seed"],
    )


# -- replay ----------------------------------------------------------------------


@dataclass(frozen=True)
class ReplayOutcome:
    identical: bool
    divergence: str = ""
    regenerated: Optional[Path] = None


def first_divergence(original: bytes, regenerated: bytes) -> str:
    a, b = original.decode("utf-8").splitlines(), regenerated.decode("utf-8").splitlines()
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return f"line {i + 1} ({_line_label(x)}) differs"
    if len(a) != len(b):
        return f"line {min(len(a), len(b)) + 1}: lengths differ ({len(a)} vs {len(b)} lines)"
    return ""


def _line_label(line: str) -> str:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return "unparseable"
    if obj.get("type") == "header":
        return "header"
    if obj.get("type") == "termination":
        return "termination"
    return f"step {obj.get('step_index')}"


def replay(task_dir, cfg: Optional[RunConfig] = None, world: Optional[str] = None) -> ReplayOutcome:
    """Re-run a logged task against its recorded transcript and compare bytes.

    ``cfg`` overrides the configuration recorded in the log header; since the
    configuration is part of the log, any change shows up as a divergence.
    """
    d = Path(task_dir)
    traj_path, transcript_path = d / "trajectory.jsonl", d / "transcript.jsonl"
    if not transcript_path.is_file() or not traj_path.is_file():
        raise ConfigError(f"{d} lacks trajectory.jsonl or transcript.jsonl")
    original = read_trajectory(traj_path)
    records = [json.loads(line) for line in transcript_path.read_text(encoding="utf-8").splitlines() if line]
    cfg = cfg or config_from_identity(original.header["config"])
    world_ref = original.header.get("world", "")
    try:
        w = load_world(resolve_path(world or world_ref, None, shipped_worlds_dir()))
    except ConfigError:
        raise ConfigError(f"cannot find world {world or world_ref!r} for replay") from None
    env = SimDesktop(w)
    adapter = build_adapter({"kind": "replay"}, replay_records=records)
    gw = Gateway({role: adapter for role in ROLES})
    task = original.task
    with tempfile.TemporaryDirectory(prefix="deskloop-replay-") as tmp:
        run_task(replace(task), env, gw, replace(cfg, budget=cfg.budget or task.step_budget), tmp, world_ref)
        regenerated = (Path(tmp) / task.id / "trajectory.jsonl").read_bytes()
    before = traj_path.read_bytes()
    if before == regenerated:
        return ReplayOutcome(True)
    return ReplayOutcome(False, first_divergence(before, regenerated))


def write_rows(rows: Sequence[RunOutcomeRow], path) -> None:
    Path(path).write_text(json.dumps({"rows": [r.to_dict() for r in rows]}, indent=1) + "\n", encoding="utf-8")


__all__ = [
    "LoadedConfig",
    "SuiteReport",
    "SuiteTask",
    "build_gateway",
    "config_from_identity",
    "find_task",
    "load_config",
    "load_manifest",
    "replay",
    "run_suite",
    "run_suite_task",
    "shipped_manifest",
    "shipped_scripts_dir",
    "with_overrides",
]
