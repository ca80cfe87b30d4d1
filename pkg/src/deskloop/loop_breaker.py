"""Repetition counters, tiered escalation and the one-step action blacklist.

Step ``i`` of a trajectory contributes its action ``a_i``, the observation
``o_i`` seen before acting (``pre_obs``) and the one after (``post_obs``,
which is ``o_{i+1}``). Two counters are kept at step ``t``:

* ``n_a`` counts ``i`` in ``[t-1, t]`` where ``a_i`` equals ``a_t`` and the
  action left the screen unchanged (``o_{i+1} ~ o_i``);
* ``n_o`` counts ``i`` in ``[t-2, t]`` where ``o_i ~ o_t``.

Indices below zero are skipped. ``~`` is digest distance within epsilon.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

from .actions import Action, action_fingerprint
from .core import BeliefState, LoopDecision, Observation, ReflectionSignals
from .errors import ConfigError

logger = logging.getLogger(__name__)

DIRECTIVE_MARKER = "DIRECTIVE (loop breaker"


@dataclass(frozen=True)
class LoopConfig:
    tau_a: int = 2
    tau_o: int = 3
    similarity_epsilon: int = 0
    reflection_every_step: bool = True
    blacklist_retry_budget: int = 2

    def __post_init__(self) -> None:
        if self.tau_a < 2 or self.tau_o < 2:
            raise ConfigError("tau_a and tau_o must be >= 2")
        if self.similarity_epsilon < 0:
            raise ConfigError("similarity_epsilon must be >= 0")
        if self.blacklist_retry_budget < 0:
            raise ConfigError("blacklist_retry_budget must be >= 0")


@dataclass
class LoopState:
    n_a: int = 0
    n_o: int = 0
    last_trigger: Optional[tuple[str, int]] = None


class StepLike(Protocol):
    parsed_action: Optional[Action]
    pre_obs: Observation
    post_obs: Observation


def digest_distance(d1: str, d2: str) -> int:
    """Bit Hamming distance between two equal-length hex digests."""
    if d1 == d2:
        return 0
    if len(d1) != len(d2):
        return 4 * max(len(d1), len(d2))
    try:
        return bin(int(d1, 16) ^ int(d2, 16)).count("1")
    except ValueError:
        # not hex: only exact equality counts as similar
        return 4 * len(d1) + 1


def screens_similar(o1: Observation, o2: Observation, cfg: LoopConfig = LoopConfig()) -> bool:
    if cfg.similarity_epsilon == 0:
        return o1.screen_digest == o2.screen_digest
    return digest_distance(o1.screen_digest, o2.screen_digest) <= cfg.similarity_epsilon


def _check_t(steps: Sequence[StepLike], t: int) -> None:
    if not 0 <= t < len(steps):
        raise IndexError(f"step {t} outside a trajectory of {len(steps)} steps")


def action_repeat_count(steps: Sequence[StepLike], t: int, cfg: LoopConfig = LoopConfig()) -> int:
    _check_t(steps, t)
    fp = action_fingerprint(steps[t].parsed_action)
    if fp is None:
        return 0
    n = 0
    for i in range(max(0, t - 1), t + 1):
        s = steps[i]
        if action_fingerprint(s.parsed_action) == fp and screens_similar(s.post_obs, s.pre_obs, cfg):
            n += 1
    return n


def screen_repeat_count(steps: Sequence[StepLike], t: int, cfg: LoopConfig = LoopConfig()) -> int:
    _check_t(steps, t)
    o_t = steps[t].pre_obs
    return sum(1 for i in range(max(0, t - 2), t + 1) if screens_similar(steps[i].pre_obs, o_t, cfg))


def _directive(tier: int, title: str, body: str) -> str:
    return f"{DIRECTIVE_MARKER}, tier {tier}: {title}) {body}"


def evaluate(
    steps: Sequence[StepLike],
    t: int,
    signals: Optional[ReflectionSignals] = None,
    cfg: LoopConfig = LoopConfig(),
) -> LoopDecision:
    """Escalation decision after step ``t``.

    Precedence: a SWITCH strategy signal from the reflection judge, then
    action repetition (``n_a >= tau_a``), then screen recurrence
    (``n_o >= tau_o``).
    """
    from .language import serialize_action

    n_a = action_repeat_count(steps, t, cfg)
    n_o = screen_repeat_count(steps, t, cfg)
    action = steps[t].parsed_action
    fp = action_fingerprint(action)
    call = serialize_action(action) if action is not None else "(no action)"

    if signals is not None and signals.strategy == "SWITCH":
        reason = signals.strategy_reason or "no reason given"
        if fp is None:
            # nothing to blacklist: demand the strategy change alone
            return LoopDecision(
                "strategy-change", n_a, n_o, None,
                _directive(3, "reflection switch",
                           f"The external reflection judge signalled SWITCH ({reason}). "
                           "Abandon the current approach and pick a different overall strategy."),
            )
        return LoopDecision(
            "reflection-switch", n_a, n_o, fp,
            _directive(3, "reflection switch",
                       f"The external reflection judge signalled SWITCH ({reason}). "
                       f"The action `{call}` is blacklisted for this step. "
                       "Abandon the current approach and pick a different overall strategy."),
        )
    if n_a >= cfg.tau_a:
        return LoopDecision(
            "modality-switch", n_a, n_o, fp,
            _directive(1, "modality switch",
                       f"The action `{call}` produced no visible change {n_a} times in a row. "
                       "It is blacklisted for this step. Switch the interaction modality "
                       "(GUI click -> keyboard shortcut -> code agent) instead of repeating it."),
        )
    if n_o >= cfg.tau_o:
        return LoopDecision(
            "strategy-change", n_a, n_o, None,
            _directive(2, "strategy change",
                       f"The same screen has appeared {n_o} times within the last three steps "
                       f"(last action: `{call}`). The current approach is not making progress; "
                       "change the overall strategy rather than retrying variations of it."),
        )
    return LoopDecision("none", n_a, n_o)


def triggering_steps(steps: Sequence[StepLike], t: int, decision: LoopDecision,
                     cfg: LoopConfig = LoopConfig()) -> set[int]:
    """Window members that made ``decision`` fire at step ``t``.

    Used to mark loop segments: action repetition marks the counted steps of
    the ``[t-1, t]`` window, screen recurrence marks the steps whose
    observation matched ``o_t``, and a reflection trigger marks ``t`` alone.
    """
    if decision.tier == "modality-switch":
        fp = action_fingerprint(steps[t].parsed_action)
        return {
            i for i in range(max(0, t - 1), t + 1)
            if action_fingerprint(steps[i].parsed_action) == fp
            and screens_similar(steps[i].post_obs, steps[i].pre_obs, cfg)
        }
    if decision.tier == "strategy-change" and decision.n_o >= cfg.tau_o:
        o_t = steps[t].pre_obs
        return {i for i in range(max(0, t - 2), t + 1) if screens_similar(steps[i].pre_obs, o_t, cfg)}
    if decision.triggered:
        return {t}
    return set()


def enforce_blacklist(belief: BeliefState, proposed: Action) -> str:
    """``"reject"`` if the proposal is currently blacklisted, else ``"allow"``."""
    return "reject" if action_fingerprint(proposed) in belief.blacklist else "allow"


def refusal_note(proposed: Action) -> str:
    from .language import serialize_action

    return (
        f"REFUSED: `{serialize_action(proposed)}` is blacklisted by the loop breaker for this step. "
        "Choose a different action."
    )
