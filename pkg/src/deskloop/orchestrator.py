"""The Manager run loop.

Each step: compose the prompt, query the Manager, parse its five-section
reply, enforce the loop breaker's blacklist, dispatch the action (UI events,
tool call or terminal), micro-verify, run the loop breaker (with the
reflection judge), and route completion claims through the gate and the
judge. A run ends on an accepted ``done()``, a ``fail()``, budget
exhaustion, or a backend outage.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .actions import (
    ACTION_DOCS,
    ACTION_TYPES,
    Action,
    CallCodeAgent,
    CallSearchAgent,
    Done,
    Fail,
    Wait,
)
from .backends import Gateway, ImageRef
from .core import (
    FEATURES,
    BeliefState,
    InputEvent,
    Injection,
    JudgeVerdict,
    LoopDecision,
    MicroVerifyOutcome,
    Observation,
    ReflectionSignals,
    StepRecord,
    TaskSpec,
    TerminationRecord,
    append_step,
    dumps_line,
    inject_rejection,
    termination_trailer,
    trajectory_header,
    write_trajectory,
)
from .errors import (
    BackendUnavailableError,
    ConfigError,
    EmptyOutputError,
    GroundingError,
    ParseError,
    ReplayExhaustedError,
)
from .language import (
    ManagerOutput,
    PromptTemplate,
    parse_manager_output,
    parse_reflection,
    render_prompt,
    serialize_action,
)
from .loop_breaker import (
    LoopConfig,
    action_repeat_count,
    enforce_blacklist,
    evaluate,
    refusal_note,
    screen_repeat_count,
    screens_similar,
)
from .tools import SandboxPolicy, resolve_target, run_code_session, run_search
from .verifier import (
    VerifierConfig,
    fallback_criterion,
    final_termination,
    gate,
    judge_completion,
    micro_verify,
)

logger = logging.getLogger(__name__)

TOOL_FEATURE = {CallSearchAgent: "search", CallCodeAgent: "coder"}


@dataclass(frozen=True)
class RunConfig:
    """Everything that shapes a run. ``identity()`` goes into the log header."""

    budget: Optional[int] = None  # overrides the task's own budget when set
    features: frozenset[str] = frozenset(FEATURES)
    loop: LoopConfig = LoopConfig()
    verifier: VerifierConfig = VerifierConfig()
    malformed_retry_cap: int = 3
    history_window: int = 10
    coder_budget: int = 20
    command_timeout_s: float = 30.0
    network_allowed: bool = False
    live: bool = False
    platform: str = "Linux (simulated desktop)"
    prompt_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self) -> None:
        unknown = set(self.features) - set(FEATURES)
        if unknown:
            raise ConfigError(f"unknown feature flags: {sorted(unknown)}")
        if self.budget is not None and self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.malformed_retry_cap < 1:
            raise ConfigError("malformed_retry_cap must be >= 1")
        object.__setattr__(self, "features", frozenset(self.features))

    def enabled(self, feature: str) -> bool:
        return feature in self.features

    def identity(self) -> dict:
        return {
            "features": sorted(self.features),
            "loop": asdict(self.loop),
            "verifier": {**asdict(self.verifier), "uncertainty_phrases": list(self.verifier.uncertainty_phrases)},
            "malformed_retry_cap": self.malformed_retry_cap,
            "history_window": self.history_window,
            "coder_budget": self.coder_budget,
            "command_timeout_s": self.command_timeout_s,
            "network_allowed": self.network_allowed,
            "live": self.live,
            "platform": self.platform,
            "seed": self.seed,
        }


@dataclass
class RunResult:
    task_id: str
    trajectory_path: Optional[str]
    termination: TerminationRecord
    env_success: Optional[bool]
    step_count: int
    counters: dict = field(default_factory=dict)
    steps: list[StepRecord] = field(default_factory=list)
    family: str = ""
    expected_solvable: Optional[bool] = None

    @property
    def claimed_done(self) -> bool:
        return self.termination.kind == "done-accepted"

    def summary(self) -> dict:
        return {
            "task_id": self.task_id,
            "termination": self.termination.kind,
            "reason": self.termination.reason,
            "env_success": self.env_success,
            "step_count": self.step_count,
            "counters": self.counters,
        }


@dataclass
class _Pending:
    """The step being built, in the shape the loop breaker reads."""

    parsed_action: Optional[Action]
    pre_obs: Observation
    post_obs: Observation


def _fragment(name: str, prompt_dir: Optional[str]) -> str:
    if prompt_dir and (Path(prompt_dir) / name).is_file():
        return (Path(prompt_dir) / name).read_text(encoding="utf-8")
    return resources.files("deskloop.prompts").joinpath(name).read_text(encoding="utf-8")


def _clip(text: str, n: int = 600) -> str:
    text = " ".join(text.split())
    return text if len(text) <= n else text[: n - 3] + "..."


def render_history(steps: Sequence[StepRecord], window: int) -> str:
    """Compact textual history of the last ``window`` steps."""
    if not steps:
        return "(no previous steps)"
    lines = []
    for rec in steps[-window:]:
        call = serialize_action(rec.parsed_action) if rec.parsed_action else None
        if call is None:
            if rec.has_annotation("blocked"):
                call = "(blocked: proposals were blacklisted)"
            else:
                call = "(no valid action: malformed output)"
        lines.append(f"Step {rec.step_index}: {call}")
        mv = rec.micro_verify
        if mv is not None:
            if mv.no_change:
                lines.append("  check: no visible change (waited 1s before re-check)")
            else:
                lines.append(f"  check: {mv.rule} -> {mv.satisfied} ({mv.evidence})")
        if rec.has_annotation("failed-grounding"):
            lines.append("  grounding failed: target not found on screen")
        if rec.has_annotation("tool-disabled"):
            lines.append("  tool unavailable in this run")
        if rec.tool_output:
            lines.append(f"  tool output: {_clip(rec.tool_output)}")
    return "\n".join(lines)


def _update_criteria(belief: BeliefState, mo: ManagerOutput, annotations: list[dict]) -> None:
    new = list(mo.criteria)
    if not new:
        # no statuses this step: nothing counts as evidenced
        belief.criteria = [replace(c, status="unmet", evidence="") for c in belief.criteria]
        return
    if belief.criteria and [c.statement.lower() for c in new] != [c.statement.lower() for c in belief.criteria]:
        annotations.append({"kind": "criteria-rewritten", "count": len(new)})
    belief.criteria = new
    if mo.criteria_truncated:
        annotations.append({"kind": "criteria-truncated", "dropped": mo.criteria_truncated})


class TaskRunner:
    """Runs one task against one environment. Not shared between tasks."""

    def __init__(self, task: TaskSpec, env, gateway: Gateway, cfg: RunConfig = RunConfig(),
                 out_dir: Optional[str | Path] = None, world_ref: str = ""):
        budget = cfg.budget or task.step_budget
        self.task = replace(task, step_budget=budget, features=cfg.features)
        self.env = env
        self.gateway = gateway
        self.cfg = cfg
        self.world_ref = world_ref
        self.task_dir = Path(out_dir) / task.id if out_dir is not None else None
        self.templates = {
            role: PromptTemplate.load(role, self._template_path(role))
            for role in ("manager", "reflection", "verifier", "search", "coder")
        }
        self.belief = BeliefState(self.task)
        self.last_reflection = "(no reflection yet)"
        self.no_change_pending = False
        self.rejections = 0
        self._workspace: Optional[Path] = None
        self._tmp: Optional[str] = None
        self._static = self._static_bindings()

    def _template_path(self, role: str) -> Optional[Path]:
        if self.cfg.prompt_dir:
            p = Path(self.cfg.prompt_dir) / f"{role}.txt"
            if p.is_file():
                return p
        return None

    def _static_bindings(self) -> dict[str, str]:
        usage = []
        if self.task.enabled("search"):
            usage.append(_fragment("usage_search.txt", self.cfg.prompt_dir).rstrip())
        if self.task.enabled("coder"):
            usage.append(_fragment("usage_coder.txt", self.cfg.prompt_dir).rstrip())
        hidden = {n for cls, feat in TOOL_FEATURE.items() if not self.task.enabled(feat) for n in [cls.name]}
        space = [f"- agent.{sig}: {desc}" for name, (sig, desc) in ACTION_DOCS.items()
                 if name in ACTION_TYPES and name not in hidden]
        return {
            "TASK_DESCRIPTION": self.task.instruction,
            "PLATFORM": self.cfg.platform,
            "LOOP_BREAKER_RULES": _fragment("loop_breaker_rules.txt", self.cfg.prompt_dir)
            if self.task.enabled("loop_breaker") else "",
            "AGENT_USAGE": "\n".join(usage) if usage else "- No helper agents are available in this run.",
            "ACTION_SPACE": "\n".join(space),
        }

    # -- prompts -----------------------------------------------------------------

    def _manager_prompt(self, t: int, obs: Observation, notes: Sequence[str]) -> str:
        b = self.belief
        screen = obs.description or f"(screenshot {obs.image_ref})"
        if not obs.stable:
            screen += "\n(loading indicator visible)"
        bindings = dict(self._static, STEP=str(t), OBSERVATION=screen,
                        HISTORY=render_history(b.history, self.cfg.history_window),
                        REFLECTION=self.last_reflection)
        text = render_prompt(self.templates["manager"], bindings,
                             [i for i in b.injections if i.kind != "directive"], b.active_directives)
        if notes:
            text = text.rstrip("\n") + "\n\n# Framework notes for this step\n" + "\n".join(notes) + "\n"
        return text

    # -- one step -----------------------------------------------------------------

    def step(self, t: int, obs: Observation) -> tuple[StepRecord, Optional[TerminationRecord], Observation]:
        b, cfg, task = self.belief, self.cfg, self.task
        ann: list[dict] = []
        injected: list[Injection] = []
        notes: list[str] = []
        mo: Optional[ManagerOutput] = None
        text, prompt = "", ""
        malformed = blacklist_rejects = 0
        asked_for_criteria = False
        blocked: Optional[Action] = None

        while True:
            prompt = self._manager_prompt(t, obs, notes)
            try:
                text = self.gateway.complete(self.gateway.request("manager", prompt, [ImageRef(obs.image_ref)], task.id))
                candidate = parse_manager_output(text)
            except (ParseError, EmptyOutputError) as exc:
                malformed += 1
                ann.append({"kind": "malformed-output", "detail": str(exc)})
                if malformed >= cfg.malformed_retry_cap:
                    break
                notes.append(f"FORMAT ERROR in your previous reply: {exc}. Reply again with all five sections "
                             "and exactly one grounded action.")
                continue
            if t == 0 and not b.criteria and not candidate.criteria:
                if not asked_for_criteria:
                    asked_for_criteria = True
                    ann.append({"kind": "criteria-missing"})
                    notes.append("Your Completion Gate must list 1-3 numbered success criteria.")
                    continue
            if task.enabled("loop_breaker") and enforce_blacklist(b, candidate.grounded_action) == "reject":
                blacklist_rejects += 1
                ann.append({"kind": "blacklist-retry", "action": serialize_action(candidate.grounded_action)})
                if blacklist_rejects > cfg.loop.blacklist_retry_budget:
                    blocked = candidate.grounded_action
                    break
                notes.append(refusal_note(candidate.grounded_action))
                continue
            mo = candidate
            break

        prompt_digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        if mo is not None:
            _update_criteria(b, mo, ann)
        if t == 0 and not b.criteria:
            b.criteria = [fallback_criterion(task)]
            ann.append({"kind": "criteria-fallback"})
            logger.info("task %s: synthesized a success criterion from the instruction", task.id)
        if blocked is not None:
            ann.append({"kind": "blocked", "action": serialize_action(blocked)})

        action = mo.grounded_action if mo is not None else None
        g = gate(b.criteria, obs, self.no_change_pending,
                 mo.gate_decision if mo else "CONTINUE", mo.declares_impossible if mo else False)
        if mo is not None and mo.gate_ambiguous:
            ann.append({"kind": "gate-ambiguous"})
        if mo is not None and mo.gate_decision == "DONE" and not isinstance(action, Done):
            ann.append({"kind": "contract-violation", "detail": "gate decided DONE but the action is not done()"})
        if not cfg.live and hasattr(self.env, "unmet_conditions"):
            truth = not self.env.unmet_conditions()
            if (g.value == "DONE") != truth:
                ann.append({"kind": "gate-discrepancy", "gate": g.value, "ground_truth_met": truth})

        term: Optional[TerminationRecord] = None
        verdict: Optional[JudgeVerdict] = None
        mv: Optional[MicroVerifyOutcome] = None
        tool_output = ""
        post = obs

        n_injections = len(b.injections)
        if isinstance(action, Done):
            if task.enabled("verifier"):
                verdict = judge_completion(task, obs, b, self.gateway, self.templates["verifier"],
                                           render_history(b.history, cfg.history_window), cfg.verifier)
                term = final_termination(g, verdict, t)
                if term is None:
                    self.rejections += 1
                    if verdict.complete:
                        unmet = [str(c.index) for c in b.criteria if not c.met]
                        why = ("criteria " + ", ".join(unmet) + " lack visible evidence") if unmet else \
                            "the UI is not stable yet"
                        inject_rejection(b, f"completion gate not satisfied: {why}")
                    ann.append({"kind": "done-rejected", "gate": g.value, "judge_complete": verdict.complete})
                    if self.rejections > cfg.verifier.rejection_warning_cap:
                        ann.append({"kind": "rejection-cap-warning", "rejections": self.rejections})
            else:
                term = TerminationRecord("done-accepted", t, "completion accepted without verification")
            post = self.env.observe(t + 1)
        elif isinstance(action, Fail):
            term = TerminationRecord("fail-declared", t, _clip(mo.completion_gate, 200) if mo else "")
            post = self.env.observe(t + 1)
        elif isinstance(action, (CallSearchAgent, CallCodeAgent)):
            feature = TOOL_FEATURE[type(action)]
            if not task.enabled(feature):
                ann.append({"kind": "tool-disabled", "tool": feature})
            elif isinstance(action, CallSearchAgent):
                found, note = run_search(action.query, b, self.gateway, self.templates["search"], task.id)
                if note:
                    ann.append(note)
                tool_output = found or ""
            else:
                tool_output = self._code_session(action.task, t, ann)
            self.no_change_pending = False  # the screen is re-observed after the tool
            post = self.env.observe(t + 1)
        elif action is not None:
            post, mv = self._execute_ui(action, t, obs, ann)
        else:
            post = self.env.observe(t + 1)
        injected.extend(b.injections[n_injections:])

        # loop breaker (with reflection); the current blacklist is consumed by this step
        loop_note: Optional[LoopDecision] = None
        signals: Optional[ReflectionSignals] = None
        b.active_directives, b.blacklist = [], set()
        if task.enabled("loop_breaker") and term is None:
            pending = [_Pending(r.parsed_action, r.pre_obs, r.post_obs) for r in b.history]
            pending.append(_Pending(action, obs, post))
            if cfg.loop.reflection_every_step:
                signals = self._reflect(pending, post, mv, ann)
            loop_note = evaluate(pending, t, signals, cfg.loop)
            if loop_note.triggered:
                b.active_directives = [loop_note.directive]
                if loop_note.blacklisted:
                    b.blacklist = {loop_note.blacklisted}
                injected.append(Injection("directive", loop_note.directive, t))
        elif action is not None and action.is_ui:
            # ablated: counters are still recorded, nothing is escalated
            pending = [_Pending(r.parsed_action, r.pre_obs, r.post_obs) for r in b.history]
            pending.append(_Pending(action, obs, post))
            loop_note = LoopDecision("none", action_repeat_count(pending, t, cfg.loop),
                                     screen_repeat_count(pending, t, cfg.loop))

        rec = StepRecord(
            step_index=t,
            prompt_digest=prompt_digest,
            model_output=text,
            parsed_action=action,
            pre_obs=obs,
            post_obs=post,
            micro_verify=mv,
            loop_note=loop_note,
            verifier_note=verdict,
            gate=g,
            injected=tuple(injected),
            annotations=tuple(ann),
            tool_output=tool_output,
        )
        return rec, term, post

    def _execute_ui(self, action: Action, t: int, obs: Observation, ann: list[dict]):
        element = None
        if isinstance(action, Wait):
            self.env.execute(InputEvent("wait", seconds=float(action.seconds)))
            self.no_change_pending = False
            return self.env.observe(t + 1), None
        try:
            resolved = resolve_target(action, obs, self.gateway, self.task.id)
            element = resolved.element
            for ev in resolved.events:
                note = self.env.execute(ev)
                if note:
                    ann.append({"kind": "env-note", "detail": note})
        except GroundingError as exc:
            ann.append({"kind": "failed-grounding", "detail": str(exc)})
        post = self.env.observe(t + 1)
        mv = micro_verify(action, obs, post, element, screens_similar(obs, post, self.cfg.loop), self.cfg.live)
        self.no_change_pending = mv.no_change
        if mv.no_change:
            # wait before re-checking instead of repeating the action
            self.env.execute(InputEvent("wait", seconds=mv.recheck_wait_s))
            post = self.env.observe(t + 1)
        return post, mv

    def _code_session(self, goal: str, t: int, ann: list[dict]) -> str:
        workspace = self._workspace_dir()
        policy = SandboxPolicy(str(workspace), self.cfg.command_timeout_s, self.cfg.network_allowed)
        session = run_code_session(goal, policy, self.gateway, self.templates["coder"],
                                   self.cfg.coder_budget, self.task.id)
        if self.task_dir is not None:
            sess_dir = self.task_dir / "code_sessions"
            sess_dir.mkdir(parents=True, exist_ok=True)
            (sess_dir / f"step-{t:04d}.json").write_text(dumps_line(session.to_dict()) + "\n", encoding="utf-8")
        if hasattr(self.env, "sync_files"):
            self.env.sync_files(workspace)
        ann.append({"kind": "code-session", "status": session.status, "steps": len(session.transcript)})
        return session.summary

    def _workspace_dir(self) -> Path:
        if self._workspace is None:
            if self.task_dir is not None:
                self._workspace = self.task_dir / "workspace"
                if self._workspace.exists():
                    shutil.rmtree(self._workspace)
            else:
                self._tmp = tempfile.mkdtemp(prefix="deskloop-")
                self._workspace = Path(self._tmp)
            self._workspace.mkdir(parents=True, exist_ok=True)
        return self._workspace

    def _reflect(self, pending: list[_Pending], post: Observation, mv: Optional[MicroVerifyOutcome],
                 ann: list[dict]) -> Optional[ReflectionSignals]:
        last = pending[-1]
        call = serialize_action(last.parsed_action) if last.parsed_action else "(no action)"
        check = "" if mv is None else (
            "no visible change" if mv.no_change else f"{mv.rule} -> {mv.satisfied} ({mv.evidence})")
        trajectory = "\n".join([
            render_history(self.belief.history, self.cfg.history_window),
            f"Step {len(pending) - 1}: {call}" + (f"\n  check: {check}" if check else ""),
            "Screen after the last action:",
            post.description or f"(screenshot {post.image_ref})",
        ])
        prompt = render_prompt(self.templates["reflection"],
                               {"TASK_DESCRIPTION": self.task.instruction, "TRAJECTORY": trajectory})
        raw = self.gateway.complete(self.gateway.request("reflection", prompt, [ImageRef(post.image_ref)], self.task.id))
        try:
            signals = parse_reflection(raw)
        except ParseError as exc:
            logger.warning("task %s: malformed reflection output (%s); treating as KEEP", self.task.id, exc)
            ann.append({"kind": "reflection-malformed", "detail": str(exc)})
            self.last_reflection = "(reflection unavailable)"
            return None
        self.last_reflection = raw.strip()
        if signals.termination == "DONE":
            ann.append({"kind": "reflection-advisory-done"})
        return signals

    # -- whole run ------------------------------------------------------------------

    def run(self) -> RunResult:
        task = self.task
        header = trajectory_header(task, self.cfg.identity(), self.world_ref)
        obs = self.env.observe(0)
        term: Optional[TerminationRecord] = None
        try:
            for t in range(task.step_budget):
                try:
                    rec, term, obs = self.step(t, obs)
                except (BackendUnavailableError, ReplayExhaustedError) as exc:
                    logger.error("task %s aborted at step %d: %s", task.id, t, exc)
                    term = TerminationRecord("aborted", t, f"backend unavailable: {exc}")
                    break
                append_step(self.belief, rec)
                if term is not None:
                    break
            if term is None:
                term = TerminationRecord("budget-exhausted", len(self.belief.history), "step budget exhausted")
        finally:
            if self._tmp:
                shutil.rmtree(self._tmp, ignore_errors=True)
        env_success = None if self.cfg.live else bool(self.env.evaluate_success())
        steps = self.belief.history
        trailer = termination_trailer(term, env_success, len(steps))
        path = None
        if self.task_dir is not None:
            self.task_dir.mkdir(parents=True, exist_ok=True)
            path = self.task_dir / "trajectory.jsonl"
            write_trajectory(path, header, steps, trailer)
            with open(self.task_dir / "transcript.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                for r in self.gateway.transcript(task.id):
                    fh.write(dumps_line(r) + "\n")
        tiers = Counter(s.loop_note.tier for s in steps if s.loop_note and s.loop_note.triggered)
        counters = {
            "tiers": dict(sorted(tiers.items())),
            "blocked": sum(s.has_annotation("blocked") for s in steps),
            "malformed": sum(s.parsed_action is None and not s.has_annotation("blocked") for s in steps),
            "rejections": sum(s.has_annotation("done-rejected") for s in steps),
        }
        return RunResult(task.id, str(path) if path else None, term, env_success, len(steps), counters, list(steps))


def run_task(task: TaskSpec, env, gateway: Gateway, cfg: RunConfig = RunConfig(),
             out_dir: Optional[str | Path] = None, world_ref: str = "") -> RunResult:
    """Run one task to termination and (optionally) write its logs."""
    return TaskRunner(task, env, gateway, cfg, out_dir, world_ref).run()


__all__ = ["RunConfig", "RunResult", "TaskRunner", "render_history", "run_task"]
