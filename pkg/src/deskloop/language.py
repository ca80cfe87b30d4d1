"""Parsers and serializers for everything the models emit, plus prompt rendering.

Every parser here is pure and total: it returns a value or raises a subclass
of :class:`~deskloop.errors.ParseError`; no input is allowed to escape with
any other exception type.
"""

from __future__ import annotations

import ast
import json
import math
import re
import warnings
from dataclasses import MISSING, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from .actions import ACTION_TYPES, Action, Hotkey, SetCellValues
from .core import Injection, JudgeVerdict, ReflectionSignals, SuccessCriterion
from .errors import (
    ActionArgumentError,
    MalformedOutputError,
    ParseError,
    RenderError,
    UnknownActionError,
)

DEFAULT_UNCERTAINTY_PHRASES = ("not sure", "unclear", "cannot verify")
MAX_CRITERIA = 3

# the closing fence must start a line, so "```" inside a string literal is not one
_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)^[ \t]*```", re.S | re.M)
_SURROGATE_RE = re.compile("[\ud800-\udfff]")
_CALL_START_RE = re.compile(r"\bagent\s*\.\s*([A-Za-z_]\w*)\s*\(")


# -- grounded actions ----------------------------------------------------------


def _literal(node: ast.AST) -> Any:
    try:
        value = ast.literal_eval(node)
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError) as exc:
        raise ActionArgumentError(f"arguments must be literals: {exc}") from None
    if isinstance(value, complex) or isinstance(value, (set, bytes)):
        raise ActionArgumentError("unsupported literal type")
    return value


def _coerce(kind: str, value: Any, name: str) -> Any:
    if kind.startswith("keys"):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        return value
    if kind == "cells":
        if not isinstance(value, dict):
            raise ActionArgumentError(f"{name} must be a mapping of cell references to values")
        return tuple(value.items())
    return value


def _build_action(name: str, args: Sequence[Any]) -> Action:
    cls = ACTION_TYPES.get(name)
    if cls is None:
        raise UnknownActionError(f"unknown action agent.{name}")
    if cls is Hotkey:
        keys = args[0] if len(args) == 1 and isinstance(args[0], (list, tuple)) else args
        if not keys:
            raise ActionArgumentError("agent.hotkey needs at least one key")
        return Hotkey(tuple(keys))
    specs = cls.ARGS
    required = sum(1 for f in fields(cls) if f.default is MISSING and f.default_factory is MISSING)
    if not (required <= len(args) <= len(specs)):
        want = f"{required}" if required == len(specs) else f"{required}-{len(specs)}"
        raise ActionArgumentError(f"agent.{name} takes {want} arguments, got {len(args)}")
    kwargs = {fname: _coerce(kind, v, fname) for (fname, kind), v in zip(specs, args)}
    try:
        return cls(**kwargs)
    except ActionArgumentError:
        raise
    except (TypeError, ValueError) as exc:
        raise ActionArgumentError(str(exc)) from None


def _call_candidates(text: str) -> list[ast.Call]:
    """Every syntactically complete ``agent.<name>(...)`` call in ``text``."""
    calls = []
    covered = 0  # end of the last accepted call; matches inside it are string contents
    for m in _CALL_START_RE.finditer(text):
        start = m.start()
        if start < covered:
            continue
        # the call ends at some ')'; take the shortest prefix that parses
        pos = m.end() - 1
        while True:
            pos = text.find(")", pos + 1)
            if pos == -1:
                break
            snippet = text[start : pos + 1]
            try:
                with warnings.catch_warnings():
                    # invalid escapes such as "\d" in model text are harmless here
                    warnings.simplefilter("ignore", (SyntaxWarning, DeprecationWarning))
                    tree = ast.parse(snippet, mode="eval")
            except (SyntaxError, ValueError, MemoryError, RecursionError):
                continue
            node = tree.body
            if (
                isinstance(node, ast.Call)
                and isinstance(node.func, ast.Attribute)
                and isinstance(node.func.value, ast.Name)
                and node.func.value.id == "agent"
            ):
                calls.append(node)
                covered = pos + 1
            break
    return calls


def parse_grounded_action(text: str) -> Action:
    """Extract the single ``agent.<name>(...)`` call from model output."""
    if not isinstance(text, str):
        raise MalformedOutputError("expected text")
    blocks = _FENCE_RE.findall(text)
    if len(blocks) > 1:
        raise MalformedOutputError(f"expected at most one fenced code block, found {len(blocks)}")
    body = blocks[0] if blocks else text
    calls = _call_candidates(body)
    if not calls:
        raise MalformedOutputError("no agent.<action>(...) call found")
    if len(calls) > 1:
        raise MalformedOutputError(f"expected a single action call, found {len(calls)}")
    call = calls[0]
    if call.keywords:
        raise ActionArgumentError("keyword arguments are not supported; use positional arguments")
    if any(isinstance(a, ast.Starred) for a in call.args):
        raise ActionArgumentError("starred arguments are not supported")
    args = [_literal(a) for a in call.args]
    return _build_action(call.func.attr, args)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, str):
        # lone surrogates cannot be written raw; keep them as escapes
        return _SURROGATE_RE.sub(lambda m: "\\u%04x" % ord(m.group(0)), json.dumps(value, ensure_ascii=False))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            raise ValueError("non-finite float in action")
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def serialize_action(action: Action) -> str:
    """Canonical one-line ``agent.<name>(...)`` form of an action."""
    if isinstance(action, Hotkey):
        return f"agent.hotkey({', '.join(_fmt(k) for k in action.keys)})"
    if isinstance(action, SetCellValues):
        items = ", ".join(f"{_fmt(k)}: {_fmt(v)}" for k, v in action.cells)
        return f"agent.set_cell_values({{{items}}})"
    values = [getattr(action, fname) for fname, _ in action.ARGS]
    # drop trailing arguments still at their default, but keep anything before
    # a non-default one so positions stay aligned
    defaults = {f.name: f.default for f in fields(action)}
    keep = len(values)
    for i in range(len(values) - 1, -1, -1):
        fname = action.ARGS[i][0]
        d = defaults[fname]
        if d is MISSING or values[i] != d:
            break
        # never drop the click count/button: the canonical click shows them
        if action.name == "click" and fname in ("count", "button"):
            break
        keep = i
    return f"agent.{action.name}({', '.join(_fmt(v) for v in values[:keep])})"


# -- manager output -------------------------------------------------------------

SECTION_NAMES = (
    "completion gate",
    "previous action verification",
    "screenshot analysis",
    "next action",
    "grounded action",
)
_SECTION_RE = re.compile(
    r"^[ \t#*>_-]*\((" + "|".join(SECTION_NAMES) + r")\)[ \t*_:-]*", re.I | re.M
)
_GATE_TOKEN_RE = re.compile(r"\b(DONE|FAIL|CONTINUE)\b")
_DECISION_LINE_RE = re.compile(r"^[ \t*_-]*decision\b(.*)$", re.I | re.M)
_CRITERION_RE = re.compile(r"^[ \t]*(?:[-*][ \t]*)?(?:c(?:riterion)?[ \t]*)?(\d+)[.):][ \t]+(.+)$", re.I | re.M)
_STATUS_RE = re.compile(
    r"[ \t]+(?:--|—|–|\||->|=>)[ \t]*(?:status[ \t]*:[ \t]*)?(not met|unmet|met|satisfied|unsatisfied)\b[ \t]*[:\-]?[ \t]*(.*)$",
    re.I,
)
_EXACT_TAG_RE = re.compile(r"\[\s*exact\s*check\s*\]", re.I)
_FEASIBILITY_FAIL_RE = re.compile(r"feasib\w*[ \t]*[:\-][ \t]*(impossible|infeasible)\b[ \t,;:.\-]*(\S.*)", re.I)


@dataclass(frozen=True)
class ManagerOutput:
    completion_gate: str
    gate_decision: str
    prev_verification: str
    screenshot_analysis: str
    next_action: str
    grounded_action: Action
    criteria: tuple[SuccessCriterion, ...] = ()
    criteria_truncated: int = 0
    gate_ambiguous: bool = False
    declares_impossible: bool = False


def parse_criteria(gate_text: str) -> tuple[list[SuccessCriterion], int]:
    """Numbered criterion lines of a Completion Gate section.

    Returns the (at most three) criteria and how many extra lines were dropped.
    A criterion claimed met without evidence stays unmet.
    """
    found = []
    for m in _CRITERION_RE.finditer(gate_text):
        body = m.group(2).strip()
        status, evidence = "unmet", ""
        sm = _STATUS_RE.search(body)
        if sm:
            word = sm.group(1).lower()
            evidence = sm.group(2).strip()
            body = body[: sm.start()].strip()
            if word in ("met", "satisfied") and evidence:
                status = "met-with-evidence"
        exact = bool(_EXACT_TAG_RE.search(body))
        statement = " ".join(_EXACT_TAG_RE.sub(" ", body).split())
        if not statement:
            continue
        found.append((statement, exact, status, evidence))
    kept = found[:MAX_CRITERIA]
    crits = [
        SuccessCriterion(i + 1, s, exact, status, ev if status == "met-with-evidence" else "")
        for i, (s, exact, status, ev) in enumerate(kept)
    ]
    return crits, len(found) - len(kept)


def _gate_decision(section: str) -> tuple[Optional[str], bool]:
    m = None
    for m in _DECISION_LINE_RE.finditer(section):
        pass
    if m is not None:
        line = m.group(1)
        # "Decision (DONE / FAIL / CONTINUE): CONTINUE" -> look after the last colon
        if ":" in line:
            line = line.rsplit(":", 1)[1]
        tokens = {t.upper() for t in re.findall(r"\b(done|fail|continue)\b", line, re.I)}
    else:
        tokens = set(_GATE_TOKEN_RE.findall(section))
    if not tokens:
        return None, False
    if len(tokens) > 1:
        return "CONTINUE", True
    return tokens.pop(), False


def parse_manager_output(text: str) -> ManagerOutput:
    if not isinstance(text, str):
        raise MalformedOutputError("expected text")
    matches = list(_SECTION_RE.finditer(text))
    sections: dict[str, str] = {}
    for i, m in enumerate(matches):
        key = m.group(1).lower()
        if key in sections:
            raise MalformedOutputError(f"duplicate ({key}) section")
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        sections[key] = text[m.end() : end].strip()
    missing = [s for s in SECTION_NAMES if s not in sections]
    if missing:
        raise MalformedOutputError("missing section(s): " + ", ".join(f"({s})" for s in missing))
    gate_text = sections["completion gate"]
    decision, ambiguous = _gate_decision(gate_text)
    if decision is None:
        raise MalformedOutputError("Completion Gate section has no DONE/FAIL/CONTINUE decision")
    action = parse_grounded_action(sections["grounded action"])
    crits, dropped = parse_criteria(gate_text)
    return ManagerOutput(
        completion_gate=gate_text,
        gate_decision=decision,
        prev_verification=sections["previous action verification"],
        screenshot_analysis=sections["screenshot analysis"],
        next_action=sections["next action"],
        grounded_action=action,
        criteria=tuple(crits),
        criteria_truncated=dropped,
        gate_ambiguous=ambiguous,
        declares_impossible=bool(_FEASIBILITY_FAIL_RE.search(gate_text)),
    )


def format_manager_output(
    action: Action | str,
    decision: str = "CONTINUE",
    criteria: Sequence[SuccessCriterion] = (),
    prev_verification: str = "n/a",
    screenshot_analysis: str = "Current screen as described.",
    next_action: str = "",
    feasibility: str = "feasible",
) -> str:
    """Render a five-section Manager response (used by scripted backends)."""
    call = action if isinstance(action, str) else serialize_action(action)
    lines = ["(Completion Gate)", "Success criteria:"]
    for c in criteria:
        tag = " [EXACT CHECK]" if c.exact_check else ""
        status = f"MET: {c.evidence}" if c.met else "UNMET"
        lines.append(f"{c.index}. {c.statement}{tag} -- {status}")
    lines.append(f"Feasibility: {feasibility}")
    lines.append(f"Decision: {decision}")
    lines += [
        "",
        "(Previous action verification)",
        prev_verification,
        "",
        "(Screenshot Analysis)",
        screenshot_analysis,
        "",
        "(Next Action)",
        next_action or f"Execute {call}",
        "",
        "(Grounded Action)",
        "```python",
        call,
        "```",
    ]
    return "\n".join(lines)


# -- reflection signals --------------------------------------------------------

_REFLECTION_LABELS = {
    "progress": r"progress\s+signal",
    "outcome": r"outcome\s+signal",
    "loop": r"loop\s+signal",
    "feasibility": r"feasibility\s+signal",
    "termination": r"termination\s+signal",
    "strategy": r"strategy\s+signal",
    "verdict": r"verdict",
}
_LABEL_LINE_RE = re.compile(
    r"^[ \t>*_#-]*(" + "|".join(_REFLECTION_LABELS.values()) + r")[ \t*_]*[:=][ \t*_]*(.*)$",
    re.I | re.M,
)


def _label_key(label: str) -> str:
    lab = " ".join(label.lower().split())
    for key, pat in _REFLECTION_LABELS.items():
        if re.fullmatch(pat, lab):
            return key
    raise AssertionError(label)


def _first_word(value: str, choices: Iterable[str], what: str) -> tuple[str, str]:
    m = re.match(r"[\s*_\"'(\[]*([A-Za-z]+)[\s*_\"')\]]*[:,.;\-]*\s*(.*)", value, re.S)
    if m and m.group(1).lower() in choices:
        return m.group(1).lower(), m.group(2).strip()
    raise MalformedOutputError(f"unrecognized {what} value {value[:40]!r}")


def parse_reflection(text: str) -> ReflectionSignals:
    if not isinstance(text, str) or not text.strip():
        raise MalformedOutputError("empty reflection output")
    matches = list(_LABEL_LINE_RE.finditer(text))
    values: dict[str, str] = {}
    for i, m in enumerate(matches):
        key = _label_key(m.group(1))
        if key in values:
            continue
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        values[key] = (m.group(2) + text[m.end() : end]).strip()
    missing = [k for k in _REFLECTION_LABELS if k not in values]
    if missing:
        raise MalformedOutputError("missing reflection line(s): " + ", ".join(missing))
    loop, loop_ev = _first_word(values["loop"], ("yes", "no"), "loop signal")
    feas, _ = _first_word(values["feasibility"], ("feasible", "uncertain", "impossible"), "feasibility signal")
    term, _ = _first_word(values["termination"], ("done", "fail", "continue"), "termination signal")
    strat, reason = _first_word(values["strategy"], ("keep", "switch"), "strategy signal")
    vm = re.search(r"case\s*([12])\b", values["verdict"], re.I)
    if not vm:
        raise MalformedOutputError("verdict must be Case 1 or Case 2")
    return ReflectionSignals(
        progress=values["progress"],
        outcome=values["outcome"],
        loop=loop == "yes",
        loop_evidence=loop_ev,
        feasibility=feas,
        termination=term.upper(),
        strategy=strat.upper(),
        strategy_reason=reason,
        verdict=f"Case {vm.group(1)}",
    )


def format_reflection(
    strategy: str = "KEEP",
    loop: bool = False,
    reason: str = "",
    termination: str = "CONTINUE",
    feasibility: str = "feasible",
) -> str:
    case = "Case 1" if strategy.upper() == "SWITCH" else "Case 2"
    return "\n".join([
        "Progress signal: " + ("no visible change" if loop else "the screen changed as expected"),
        "Outcome signal: " + ("the intended subgoal was not reached" if loop else "on track"),
        "Loop signal: " + ("yes - the same attempt keeps repeating" if loop else "no"),
        f"Feasibility signal: {feasibility}",
        f"Termination signal: {termination}",
        f"Strategy signal: {strategy.upper()}" + (f" - {reason}" if reason else ""),
        f"Verdict: {case}",
    ])


# -- judge verdicts ------------------------------------------------------------


def extract_json_object(text: str) -> Optional[dict]:
    """First decodable JSON object in ``text``, tolerating prose and fences."""
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except (json.JSONDecodeError, RecursionError, ValueError):
            obj = None
        if isinstance(obj, dict):
            return obj
        pos = text.find("{", pos + 1)
    return None


def _has_phrase(text: str, phrases: Iterable[str]) -> bool:
    low = " ".join(text.lower().split())
    return any(re.search(r"(?<!\w)" + re.escape(p.lower()) + r"(?!\w)", low) for p in phrases)


def parse_judge(text: str, uncertainty_phrases: Sequence[str] = DEFAULT_UNCERTAINTY_PHRASES) -> JudgeVerdict:
    """Parse the verifier's JSON verdict and apply conservative post-processing.

    A claimed completion is overridden to incomplete when the judge still lists
    missing steps or hedges with an uncertainty phrase. Incomplete verdicts are
    never flipped to complete.
    """
    if not isinstance(text, str):
        raise MalformedOutputError("expected text")
    obj = extract_json_object(text)
    if obj is None:
        raise MalformedOutputError("no JSON object in judge output")
    complete = obj.get("complete")
    if isinstance(complete, str) and complete.strip().lower() in ("true", "false"):
        complete = complete.strip().lower() == "true"
    if not isinstance(complete, bool):
        raise MalformedOutputError("judge JSON lacks a boolean 'complete' field")
    reason = obj.get("reason", "")
    reason = reason if isinstance(reason, str) else json.dumps(reason, ensure_ascii=False)
    missing = obj.get("missing_steps", "")
    if missing is None:
        missing = ""
    elif isinstance(missing, list):
        missing = "; ".join(str(m) for m in missing if str(m).strip())
    elif not isinstance(missing, str):
        missing = json.dumps(missing, ensure_ascii=False)
    overridden = False
    if complete and (missing.strip() or _has_phrase(reason, uncertainty_phrases)):
        complete, overridden = False, True
    return JudgeVerdict(complete=complete, reason=reason, missing_steps=missing, overridden=overridden)


def format_judge(complete: bool, reason: str, missing_steps: str = "") -> str:
    return json.dumps({"complete": complete, "reason": reason, "missing_steps": missing_steps}, ensure_ascii=False)


# -- prompt templates ----------------------------------------------------------

ROLES = ("manager", "reflection", "verifier", "search", "coder", "grounder")
_PLACEHOLDER_RE = re.compile(r"\{([A-Z][A-Z0-9_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    body: str
    required_placeholders: frozenset[str] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.required_placeholders is None:
            object.__setattr__(self, "required_placeholders", frozenset(_PLACEHOLDER_RE.findall(self.body)))

    @classmethod
    def load(cls, role: str, path: Optional[str | Path] = None) -> "PromptTemplate":
        if path is None:
            body = resources.files("deskloop.prompts").joinpath(f"{role}.txt").read_text(encoding="utf-8")
        else:
            body = Path(path).read_text(encoding="utf-8")
        return cls(role, body)


_INJECTION_TITLES = {
    "knowledge": "KNOWLEDGE from the Search Agent",
    "rejection-reason": "VERIFIER REJECTION",
    "directive": "DIRECTIVE",
}


def render_injections(injections: Sequence[Injection], directives: Sequence[str] = ()) -> str:
    if not injections and not directives:
        return ""
    out = ["# Injected context (oldest first)"]
    for inj in injections:
        out.append(f"[{_INJECTION_TITLES[inj.kind]} @ step {inj.step_index}]\n{inj.text}")
    for d in directives:
        out.append(d)
    return "\n\n".join(out)


def render_prompt(
    tpl: PromptTemplate,
    bindings: Mapping[str, str],
    injections: Sequence[Injection] = (),
    directives: Sequence[str] = (),
) -> str:
    """Substitute ``{PLACEHOLDER}`` markers, then append injected context in order."""
    unbound = sorted(p for p in tpl.required_placeholders if p not in bindings)
    if unbound:
        raise RenderError(f"{tpl.role} template: unbound placeholder(s) {', '.join(unbound)}")

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return str(bindings[key]) if key in bindings else m.group(0)

    text = _PLACEHOLDER_RE.sub(sub, tpl.body)
    extra = render_injections(injections, directives)
    if extra:
        text = text.rstrip("\n") + "\n\n" + extra + "\n"
    return text


__all__ = [
    "ManagerOutput",
    "PromptTemplate",
    "ParseError",
    "extract_json_object",
    "format_judge",
    "format_manager_output",
    "format_reflection",
    "parse_criteria",
    "parse_grounded_action",
    "parse_judge",
    "parse_manager_output",
    "parse_reflection",
    "render_prompt",
    "serialize_action",
]
