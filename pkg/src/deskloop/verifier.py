"""Termination guard: completion gate, per-action micro-verification, model judge.

A completion claim ends the run only when the Manager's own gate says DONE
*and* an independent judge accepts. Micro-verification runs after every UI
action and reports whether the action had its expected visible effect.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from .actions import Action, Click, DoubleClick, SetCellValues, Type, is_save_like
from .core import (
    BeliefState,
    GateDecision,
    JudgeVerdict,
    MicroVerifyOutcome,
    Observation,
    SuccessCriterion,
    TaskSpec,
    TerminationRecord,
    UIElement,
    inject_rejection,
)
from .errors import MalformedOutputError, NotApplicableError
from .language import DEFAULT_UNCERTAINTY_PHRASES, PromptTemplate, parse_judge, render_prompt

logger = logging.getLogger(__name__)

RULE_EXPECTATIONS = {
    "click-new-element": "a new UI element becomes visible (dialog, tab, highlight) or the clicked element changes",
    "toggle-state-changed": "the toggled element shows its new state",
    "type-field-contains": "the field contains the typed text",
    "save-artifact-visible": "a success toast, new file or exported artifact is visible",
    "no-change-wait": "no visible change: wait(1) before re-checking; do not repeat immediately",
}
NO_CHANGE_WAIT_S = 1.0


@dataclass(frozen=True)
class VerifierConfig:
    temperature: float = 0.2
    uncertainty_phrases: tuple[str, ...] = DEFAULT_UNCERTAINTY_PHRASES
    rejection_warning_cap: int = 5


# -- micro-verification -----------------------------------------------------------


def select_micro_rule(action: Action, element: Optional[UIElement] = None) -> str:
    """Verification rule for a UI action; ``element`` is the grounded target."""
    if not action.is_ui:
        raise NotApplicableError(f"{action.name} is not a UI action")
    if isinstance(action, (Type, SetCellValues)):
        return "type-field-contains"
    if is_save_like(action):
        return "save-artifact-visible"
    if isinstance(action, (Click, DoubleClick)) and element is not None and element.kind == "toggle":
        return "toggle-state-changed"
    return "click-new-element"


def _by_label(obs: Observation) -> dict[str, UIElement]:
    out: dict[str, UIElement] = {}
    for el in obs.elements:
        out.setdefault(el.label, el)
    return out


def _check_rule(rule: str, action: Action, element: Optional[UIElement],
                pre: Observation, post: Observation) -> tuple[str, str]:
    before, after = _by_label(pre), _by_label(post)
    new = [lab for lab in after if lab not in before]
    changed = [lab for lab in after if lab in before and
               (after[lab].state != before[lab].state or after[lab].content != before[lab].content)]
    if rule == "toggle-state-changed":
        if element is not None and element.label in after and after[element.label].state != element.state:
            return "yes", f"{element.label!r} is now {after[element.label].state!r}"
        return "no", "toggle state unchanged"
    if rule == "type-field-contains":
        if isinstance(action, SetCellValues):
            missing = [r for r, v in action.cells if r not in after or str(v) not in (after[r].content or "")]
            if not missing:
                return "yes", "all cells show the written values"
            return "no", "cells without the value: " + ", ".join(missing)
        text = action.text
        fields = [after[element.label]] if element is not None and element.label in after else [
            e for e in post.elements if e.kind == "field"]
        for f in fields:
            if text in (f.content or ""):
                return "yes", f"{f.label!r} contains the typed text"
        if not fields:
            # submitting may have navigated away from the field
            return "unknown", "field no longer visible"
        return "no", "typed text not found in the field"
    if rule == "save-artifact-visible":
        new_files = sorted(set(post.files) - set(pre.files))
        if new_files:
            return "yes", "new file(s): " + ", ".join(new_files)
        if new:
            return "yes", "new element(s): " + ", ".join(new)
        return "no", "no toast or artifact appeared"
    # click-new-element
    if new:
        return "yes", "new element(s): " + ", ".join(new)
    if changed:
        return "yes", "changed element(s): " + ", ".join(changed)
    return "no", "the screen changed but no new element appeared"


def micro_verify(
    action: Action,
    pre: Observation,
    post: Observation,
    element: Optional[UIElement] = None,
    similar: Optional[bool] = None,
    live: bool = False,
) -> MicroVerifyOutcome:
    """Evaluate the expected-outcome rule for ``action`` on the observation delta.

    ``similar`` is the loop breaker's ``pre ~ post`` judgement; by default it
    is digest equality. An unchanged screen is reported with the action's
    own rule, ``satisfied="no"``, ``no_change=True`` and a one-second
    re-check wait.
    """
    rule = select_micro_rule(action, element)
    expected = RULE_EXPECTATIONS[rule]
    same = pre.screen_digest == post.screen_digest if similar is None else similar
    if same:
        return MicroVerifyOutcome(rule, expected, "no", "no visible change after the action",
                                  no_change=True, recheck_wait_s=NO_CHANGE_WAIT_S)
    if live:
        return MicroVerifyOutcome(rule, expected, "unknown", "self-check requested in the next prompt")
    satisfied, evidence = _check_rule(rule, action, element, pre, post)
    return MicroVerifyOutcome(rule, expected, satisfied, evidence)


def micro_verify_prompt_note(outcome: MicroVerifyOutcome) -> str:
    """Text handed to the Manager for its Previous action verification."""
    if outcome.no_change:
        return f"Expected: {outcome.expected}. Observed: no visible change; {RULE_EXPECTATIONS['no-change-wait']}."
    return f"Expected: {outcome.expected}. Check: {outcome.satisfied} ({outcome.evidence})."


# -- completion gate --------------------------------------------------------------


def fallback_criterion(task: TaskSpec) -> SuccessCriterion:
    return SuccessCriterion(1, f"The screen visibly shows the requested outcome: {task.instruction}")


def gate(
    criteria: Sequence[SuccessCriterion],
    obs: Observation,
    no_change_pending: bool = False,
    manager_decision: str = "CONTINUE",
    declares_impossible: bool = False,
) -> GateDecision:
    """Completion gate over the current criteria and observation.

    DONE iff every criterion is met with evidence and the UI is stable (the
    environment reports no pending transition and no no-change re-check is
    outstanding). FAIL only when the Manager decided FAIL and its gate cites
    impossibility evidence. Otherwise CONTINUE.
    """
    stable = obs.stable and not no_change_pending
    snapshot = tuple((c.index, c.status) for c in criteria)
    if criteria and all(c.met for c in criteria) and stable:
        value = "DONE"
    elif manager_decision == "FAIL" and declares_impossible:
        value = "FAIL"
    else:
        value = "CONTINUE"
    return GateDecision(value, snapshot, stable)


# -- judge ----------------------------------------------------------------------


def judge_completion(
    task: TaskSpec,
    obs: Observation,
    belief: BeliefState,
    gateway,
    template: PromptTemplate,
    trajectory_text: str,
    cfg: VerifierConfig = VerifierConfig(),
) -> JudgeVerdict:
    """One verifier round trip; a rejection is injected into the belief state.

    Unparseable judge output counts as a rejection.
    """
    prompt = render_prompt(template, {
        "TASK_DESCRIPTION": task.instruction,
        "OBSERVATION": obs.description or f"screen {obs.screen_digest[:12]}",
        "TRAJECTORY": trajectory_text,
    })
    from .backends import ImageRef

    req = gateway.request("verifier", prompt, [ImageRef(obs.image_ref)], task.id)
    raw = gateway.complete(req)
    try:
        verdict = parse_judge(raw, cfg.uncertainty_phrases)
    except MalformedOutputError as exc:
        logger.warning("task %s: malformed judge output (%s); treating as rejection", task.id, exc)
        verdict = JudgeVerdict(False, "the verifier output could not be parsed", "", malformed=True)
    if not verdict.complete:
        text = verdict.reason or "completion not confirmed"
        if verdict.missing_steps:
            text += f" | missing: {verdict.missing_steps}"
        inject_rejection(belief, text)
    return verdict


def final_termination(g: GateDecision, verdict: Optional[JudgeVerdict], step_index: int) -> Optional[TerminationRecord]:
    """``done-accepted`` iff the gate says DONE and the judge accepts; else ``None``."""
    if g.value == "DONE" and verdict is not None and verdict.complete:
        return TerminationRecord("done-accepted", step_index, verdict.reason)
    return None


__all__ = [
    "VerifierConfig",
    "fallback_criterion",
    "final_termination",
    "gate",
    "judge_completion",
    "micro_verify",
    "select_micro_rule",
]
