"""Seeded generators for the round-trip, fuzz and counter corpora."""

from __future__ import annotations

import json
import random

from deskloop.actions import (
    CallCodeAgent,
    CallSearchAgent,
    Click,
    Done,
    DoubleClick,
    DragAndDrop,
    Fail,
    HighlightTextSpan,
    HoldAndPress,
    Hotkey,
    Open,
    Scroll,
    SetCellValues,
    SwitchApplications,
    Type,
    Wait,
)
from deskloop.core import SuccessCriterion
from deskloop.language import format_judge, format_manager_output, format_reflection, serialize_action

from conftest import Step, obs

TRICKY = ['"', "\\", "\n", "\t", "'", ")", "(", ",", "agent.done()", "```", "\\\"", "é", "中文", "😀",
          "\x00", "\x7f", " ", "\ud800", "{", "}", "[", "]", "#", " ", "  ", "\r"]
PLAIN = "abcdefghijklmnopqrstuvwxyz ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.-_/:"
KEYS = ["ctrl", "shift", "alt", "s", "a", "enter", "f5", "cmd", "tab"]


def text(rng: random.Random, min_len: int = 0, max_len: int = 24) -> str:
    out = []
    for _ in range(rng.randint(min_len, max_len)):
        out.append(rng.choice(TRICKY) if rng.random() < 0.25 else rng.choice(PLAIN))
    return "".join(out)


def nonblank(rng: random.Random) -> str:
    s = text(rng, 1)
    return s if s.strip() else s + "x"


def keys(rng: random.Random, n_max: int = 3) -> tuple[str, ...]:
    return tuple(rng.choice(KEYS) for _ in range(rng.randint(1, n_max)))


def number(rng: random.Random):
    if rng.random() < 0.5:
        return rng.randint(-10**6, 10**6)
    return rng.choice([0.5, 1.25, -3.0, 1e-9, 12345.678, 2.0**40])


def action(rng: random.Random):
    kind = rng.randrange(16)
    if kind == 0:
        return Click(nonblank(rng), rng.randint(1, 3), rng.choice(["left", "right", "middle"]),
                     keys(rng) if rng.random() < 0.3 else ())
    if kind == 1:
        return DoubleClick(nonblank(rng))
    if kind == 2:
        return Type(text(rng), text(rng), rng.random() < 0.5, rng.random() < 0.5)
    if kind == 3:
        return DragAndDrop(nonblank(rng), nonblank(rng))
    if kind == 4:
        return HighlightTextSpan(nonblank(rng), nonblank(rng))
    if kind == 5:
        return Scroll(nonblank(rng), rng.randint(-20, 20), rng.choice(["vertical", "horizontal"]))
    if kind == 6:
        return Open(nonblank(rng))
    if kind == 7:
        return SwitchApplications(nonblank(rng))
    if kind == 8:
        return Hotkey(keys(rng))
    if kind == 9:
        return HoldAndPress(keys(rng), keys(rng))
    if kind == 10:
        return CallCodeAgent(nonblank(rng))
    if kind == 11:
        return CallSearchAgent(nonblank(rng))
    if kind == 12:
        refs = rng.sample(["A1", "B2", "C3", "D10", "Sheet2!A1", "Z99"], rng.randint(1, 4))
        return SetCellValues(tuple((r, number(rng) if rng.random() < 0.5 else text(rng)) for r in refs))
    if kind == 13:
        return Wait(rng.choice([1, 2, 0.5, 0.25, 3.75, 10]))
    if kind == 14:
        return Done()
    return Fail()


def actions(seed: int, n: int) -> list:
    rng = random.Random(seed)
    return [action(rng) for _ in range(n)]


# -- trajectories ----------------------------------------------------------------

POOL = [Click("OK"), Click(" ok "), Click("OK", 2), DoubleClick("OK"), Hotkey(("ctrl", "s")),
        Type("name", "x"), Click("Cancel"), None]


def trajectory(rng: random.Random, max_len: int = 50, screens: str = "ABCD") -> list[Step]:
    """Random trajectory with many repeats: a small action pool and few screens."""
    n = rng.randint(1, max_len)
    digests = [rng.choice(screens)]
    for _ in range(n):
        # bias towards "no visible change" so action repeats actually occur
        digests.append(digests[-1] if rng.random() < 0.5 else rng.choice(screens))
    return [Step(rng.choice(POOL), obs(digests[i], i), obs(digests[i + 1], i + 1)) for i in range(n)]


# -- fuzz inputs -----------------------------------------------------------------


def _valid_samples(rng: random.Random) -> list[str]:
    a = action(rng)
    crit = [SuccessCriterion(1, "The file is saved", False, "met-with-evidence", "toast visible"),
            SuccessCriterion(2, "Title shows report.pdf", True)]
    return [
        serialize_action(a),
        f"```python\n{serialize_action(a)}\n```",
        format_manager_output(a, rng.choice(["DONE", "CONTINUE", "FAIL"]), crit),
        format_reflection(rng.choice(["KEEP", "SWITCH"]), rng.random() < 0.5, "reason"),
        format_judge(rng.random() < 0.5, text(rng), text(rng)),
        json.dumps({"complete": rng.choice([True, False, "true", 1, None]), "reason": [1, {"a": 2}],
                    "missing_steps": rng.choice(["", None, ["x", ""], {"k": 1}, 3])}),
    ]


def mutate(rng: random.Random, s: str) -> str:
    op = rng.randrange(6)
    if not s:
        return text(rng)
    i = rng.randrange(len(s))
    if op == 0:
        return s[:i]
    if op == 1:
        return s[:i] + s[i + 1:]
    if op == 2:
        return s[:i] + text(rng, 1, 8) + s[i:]
    if op == 3:
        return s[:i] + s[i:] * 2
    if op == 4:
        return s.replace("(", "((", 1).replace("\"", "", 1)
    return s[i:] + s[:i]


def fuzz_inputs(seed: int, n: int) -> list[str]:
    rng = random.Random(seed)
    extra = ["", " ", "{", "}", "{}", "[]", "null", "agent.", "agent.click(", "agent.click()", "agent.nope()",
             "agent.click(*x)", "agent.click(target='x')", "agent.click(1+1j)", "agent.click({1, 2})",
             "agent.hotkey()", "agent.set_cell_values([1])", "agent.wait(float('nan'))", "agent.wait(-1)",
             "agent.click(" + "[" * 500 + "]" * 500 + ")", "{" * 5000, "agent.set_cell_values({[1]: 2})",
             "(Completion Gate)\nDecision: DONE\n(Grounded Action)\nagent.done()",
             "Loop signal: maybe\nStrategy signal: KEEP", '{"complete": "yes"}', b"\xff".decode("latin-1")]
    out = list(extra)
    while len(out) < n:
        r = rng.random()
        if r < 0.15:
            out.append(text(rng, 0, 80))
        else:
            base = rng.choice(_valid_samples(rng))
            for _ in range(rng.randint(1, 3)):
                base = mutate(rng, base)
            out.append(base)
    return out[:n]
