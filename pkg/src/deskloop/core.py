"""Shared domain types, the per-run belief state and trajectory serialization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Optional

from .actions import Action
from .errors import SequencingError

FRAME_SIZE = (1920, 1080)
FEATURES = ("verifier", "loop_breaker", "search", "coder", "grounder")

MICRO_RULES = (
    "click-new-element",
    "toggle-state-changed",
    "type-field-contains",
    "save-artifact-visible",
    "no-change-wait",
)
LOOP_TIERS = ("none", "modality-switch", "strategy-change", "reflection-switch")
TERMINATION_KINDS = ("done-accepted", "fail-declared", "budget-exhausted", "aborted")
INJECTION_KINDS = ("directive", "knowledge", "rejection-reason")


@dataclass(frozen=True)
class TaskSpec:
    id: str
    instruction: str
    step_budget: int = 50
    features: frozenset[str] = frozenset(FEATURES)
    tag: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("task id must be non-empty")
        if self.step_budget < 1:
            raise ValueError("step_budget must be >= 1")
        unknown = set(self.features) - set(FEATURES)
        if unknown:
            raise ValueError(f"unknown feature flags: {sorted(unknown)}")
        object.__setattr__(self, "features", frozenset(self.features))

    def enabled(self, feature: str) -> bool:
        return feature in self.features

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "instruction": self.instruction,
            "step_budget": self.step_budget,
            "features": sorted(self.features),
            "tag": self.tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["id"], d["instruction"], d["step_budget"], frozenset(d.get("features", FEATURES)), d.get("tag", ""))


@dataclass(frozen=True)
class UIElement:
    label: str
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1
    kind: str = "text"
    state: Optional[str] = None
    content: Optional[str] = None

    @property
    def center(self) -> tuple[int, int]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) // 2, (y0 + y1) // 2

    def contains(self, x: int, y: int) -> bool:
        x0, y0, x1, y1 = self.bbox
        return x0 <= x < x1 and y0 <= y < y1


@dataclass(frozen=True)
class Observation:
    step_index: int
    screen_digest: str
    elements: tuple[UIElement, ...] = ()
    image_ref: str = ""
    stable: bool = True
    description: str = ""
    files: tuple[str, ...] = ()
    frame: tuple[int, int] = FRAME_SIZE

    def __post_init__(self) -> None:
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        w, h = self.frame
        for el in self.elements:
            x0, y0, x1, y1 = el.bbox
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise ValueError(f"bbox of {el.label!r} lies outside the {w}x{h} frame")

    def at(self, step_index: int) -> "Observation":
        return replace(self, step_index=step_index)

    def labels(self) -> list[str]:
        return [e.label for e in self.elements]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["elements"] = [
            {k: v for k, v in asdict(e).items() if v is not None} for e in self.elements
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        els = tuple(
            UIElement(e["label"], tuple(e["bbox"]), e.get("kind", "text"), e.get("state"), e.get("content"))
            for e in d.get("elements", ())
        )
        return cls(
            d["step_index"], d["screen_digest"], els, d.get("image_ref", ""), d.get("stable", True),
            d.get("description", ""), tuple(d.get("files", ())), tuple(d.get("frame", FRAME_SIZE)),
        )


@dataclass(frozen=True)
class InputEvent:
    """A coordinate-level input event, as delivered to an environment.

    ``kind`` is one of click, type, drag, select, scroll, hotkey, open,
    switch, cells or wait; the remaining fields are used as the kind needs.
    """

    kind: str
    point: Optional[tuple[int, int]] = None
    point2: Optional[tuple[int, int]] = None
    count: int = 1
    button: str = "left"
    modifiers: tuple[str, ...] = ()
    text: str = ""
    overwrite: bool = False
    submit: bool = False
    keys: tuple[str, ...] = ()
    amount: int = 0
    axis: str = "vertical"
    cells: tuple[tuple[str, Any], ...] = ()
    seconds: float = 0.0


@dataclass
class SuccessCriterion:
    index: int
    statement: str
    exact_check: bool = False
    status: str = "unmet"  # unmet | met-with-evidence
    evidence: str = ""

    def __post_init__(self) -> None:
        if self.status not in ("unmet", "met-with-evidence"):
            raise ValueError(f"bad criterion status {self.status!r}")
        if self.status == "met-with-evidence" and not self.evidence.strip():
            raise ValueError("a met criterion needs evidence")

    @property
    def met(self) -> bool:
        return self.status == "met-with-evidence"


@dataclass(frozen=True)
class MicroVerifyOutcome:
    rule: str
    expected: str
    satisfied: str  # yes | no | unknown
    evidence: str = ""
    no_change: bool = False
    recheck_wait_s: float = 0.0


@dataclass(frozen=True)
class LoopDecision:
    tier: str = "none"
    n_a: int = 0
    n_o: int = 0
    blacklisted: Optional[str] = None  # action fingerprint
    directive: str = ""

    def __post_init__(self) -> None:
        if self.tier not in LOOP_TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.tier != "none" and not self.directive:
            raise ValueError("a triggered tier needs a directive")
        if self.tier in ("modality-switch", "reflection-switch") and not self.blacklisted:
            raise ValueError(f"{self.tier} must blacklist an action")

    @property
    def triggered(self) -> bool:
        return self.tier != "none"


@dataclass(frozen=True)
class JudgeVerdict:
    complete: bool
    reason: str = ""
    missing_steps: str = ""
    overridden: bool = False
    malformed: bool = False


@dataclass(frozen=True)
class ReflectionSignals:
    progress: str
    outcome: str
    loop: bool
    loop_evidence: str
    feasibility: str  # feasible | uncertain | impossible
    termination: str  # DONE | FAIL | CONTINUE
    strategy: str  # KEEP | SWITCH
    strategy_reason: str
    verdict: str  # "Case 1" | "Case 2"


@dataclass(frozen=True)
class GateDecision:
    value: str  # DONE | CONTINUE | FAIL
    criteria_snapshot: tuple[tuple[int, str], ...] = ()
    ui_stable: bool = True


@dataclass(frozen=True)
class TerminationRecord:
    kind: str
    step_index: int
    reason: str = ""

    def __post_init__(self) -> None:
        if self.kind not in TERMINATION_KINDS:
            raise ValueError(f"unknown termination kind {self.kind!r}")


@dataclass(frozen=True)
class Injection:
    kind: str
    text: str
    step_index: int

    def __post_init__(self) -> None:
        if self.kind not in INJECTION_KINDS:
            raise ValueError(f"unknown injection kind {self.kind!r}")


@dataclass(frozen=True)
class StepRecord:
    step_index: int
    prompt_digest: str
    model_output: str
    parsed_action: Optional[Action]
    pre_obs: Observation
    post_obs: Observation
    micro_verify: Optional[MicroVerifyOutcome] = None
    loop_note: Optional[LoopDecision] = None
    verifier_note: Optional[JudgeVerdict] = None
    gate: Optional[GateDecision] = None
    injected: tuple[Injection, ...] = ()
    annotations: tuple[dict, ...] = ()
    tool_output: str = ""

    def __post_init__(self) -> None:
        if self.post_obs.step_index != self.pre_obs.step_index + 1:
            raise ValueError("post_obs must follow pre_obs by exactly one step")

    def has_annotation(self, kind: str) -> bool:
        return any(a.get("kind") == kind for a in self.annotations)

    def to_dict(self) -> dict:
        from .language import serialize_action

        return {
            "type": "step",
            "step_index": self.step_index,
            "prompt_digest": self.prompt_digest,
            "model_output": self.model_output,
            "parsed_action": serialize_action(self.parsed_action) if self.parsed_action else None,
            "pre_obs": self.pre_obs.to_dict(),
            "post_obs": self.post_obs.to_dict(),
            "micro_verify": asdict(self.micro_verify) if self.micro_verify else None,
            "loop_note": asdict(self.loop_note) if self.loop_note else None,
            "verifier_note": asdict(self.verifier_note) if self.verifier_note else None,
            "gate": _gate_dict(self.gate),
            "injected": [asdict(i) for i in self.injected],
            "annotations": list(self.annotations),
            "tool_output": self.tool_output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        from .language import parse_grounded_action

        gate = d.get("gate")
        return cls(
            step_index=d["step_index"],
            prompt_digest=d["prompt_digest"],
            model_output=d["model_output"],
            parsed_action=parse_grounded_action(d["parsed_action"]) if d.get("parsed_action") else None,
            pre_obs=Observation.from_dict(d["pre_obs"]),
            post_obs=Observation.from_dict(d["post_obs"]),
            micro_verify=MicroVerifyOutcome(**d["micro_verify"]) if d.get("micro_verify") else None,
            loop_note=LoopDecision(**d["loop_note"]) if d.get("loop_note") else None,
            verifier_note=JudgeVerdict(**d["verifier_note"]) if d.get("verifier_note") else None,
            gate=GateDecision(gate["value"], tuple(tuple(c) for c in gate["criteria_snapshot"]), gate["ui_stable"])
            if gate else None,
            injected=tuple(Injection(**i) for i in d.get("injected", ())),
            annotations=tuple(d.get("annotations", ())),
            tool_output=d.get("tool_output", ""),
        )


def _gate_dict(g: Optional[GateDecision]) -> Optional[dict]:
    if g is None:
        return None
    return {"value": g.value, "criteria_snapshot": [list(c) for c in g.criteria_snapshot], "ui_stable": g.ui_stable}


@dataclass
class BeliefState:
    """Rolling context of one task run. Owned by a single run; not shared."""

    task: TaskSpec
    criteria: list[SuccessCriterion] = field(default_factory=list)
    history: list[StepRecord] = field(default_factory=list)
    injections: list[Injection] = field(default_factory=list)
    active_directives: list[str] = field(default_factory=list)
    blacklist: set[str] = field(default_factory=set)

    @property
    def knowledge(self) -> list[str]:
        return [i.text for i in self.injections if i.kind == "knowledge"]

    @property
    def rejections(self) -> list[str]:
        return [i.text for i in self.injections if i.kind == "rejection-reason"]

    @property
    def step_index(self) -> int:
        return len(self.history)


def append_step(belief: BeliefState, rec: StepRecord) -> BeliefState:
    if rec.step_index != len(belief.history):
        raise SequencingError(
            f"step {rec.step_index} appended to a history of length {len(belief.history)}"
        )
    belief.history.append(rec)
    return belief


def inject_knowledge(belief: BeliefState, text: str, step_index: Optional[int] = None) -> BeliefState:
    if not text or not text.strip():
        raise ValueError("knowledge text must be non-empty")
    idx = belief.step_index if step_index is None else step_index
    belief.injections.append(Injection("knowledge", text, idx))
    return belief


def inject_rejection(belief: BeliefState, text: str, step_index: Optional[int] = None) -> BeliefState:
    idx = belief.step_index if step_index is None else step_index
    belief.injections.append(Injection("rejection-reason", text, idx))
    return belief


# -- trajectory JSONL ----------------------------------------------------------


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def trajectory_header(task: TaskSpec, config: dict, world: str = "") -> dict:
    return {"type": "header", "task": task.to_dict(), "config": config, "world": world}


def termination_trailer(term: TerminationRecord, env_success: Optional[bool], step_count: int) -> dict:
    return {
        "type": "termination",
        "kind": term.kind,
        "step_index": term.step_index,
        "reason": term.reason,
        "env_success": env_success,
        "step_count": step_count,
    }


@dataclass
class Trajectory:
    header: dict
    steps: list[StepRecord]
    trailer: Optional[dict]

    @property
    def task(self) -> TaskSpec:
        return TaskSpec.from_dict(self.header["task"])

    @property
    def termination(self) -> Optional[TerminationRecord]:
        if self.trailer is None:
            return None
        return TerminationRecord(self.trailer["kind"], self.trailer["step_index"], self.trailer.get("reason", ""))


def write_trajectory(path, header: dict, steps: Iterable[StepRecord], trailer: Optional[dict]) -> None:
    lines = [dumps_line(header)] + [dumps_line(s.to_dict()) for s in steps]
    if trailer is not None:
        lines.append(dumps_line(trailer))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    header, trailer, steps = None, None, []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            kind = d.get("type")
            if kind == "header":
                header = d
            elif kind == "step":
                steps.append(StepRecord.from_dict(d))
            elif kind == "termination":
                if trailer is not None:
                    raise ValueError(f"{path}:{n}: second termination record")
                trailer = d
            else:
                raise ValueError(f"{path}:{n}: unknown record type {kind!r}")
    if header is None:
        raise ValueError(f"{path}: missing header line")
    return Trajectory(header, steps, trailer)
