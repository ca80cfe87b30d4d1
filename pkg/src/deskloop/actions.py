"""The Manager's action space.

Each action is a frozen dataclass whose ``name`` is the ``agent.<name>``
function the Manager writes in its grounded-action block. Argument order of
the dataclass fields is the positional order of that call.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, fields
from typing import Any, ClassVar, Optional

from .errors import ActionArgumentError

MOUSE_BUTTONS = ("left", "right", "middle")
SCROLL_AXES = ("vertical", "horizontal")


def normalize_text(s: str) -> str:
    """Lowercase and collapse runs of whitespace."""
    return " ".join(s.split()).lower()


def _keys(value: Any, field_name: str) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, (list, tuple)) or not value:
        raise ActionArgumentError(f"{field_name} must be a non-empty list of key names")
    out = []
    for k in value:
        if not isinstance(k, str) or not k.strip():
            raise ActionArgumentError(f"{field_name} entries must be non-empty strings")
        out.append(k.strip().lower())
    return tuple(out)


@dataclass(frozen=True)
class Action:
    name: ClassVar[str] = ""
    category: ClassVar[str] = ""
    # field name -> argument kind, in positional order; trailing entries with
    # defaults may be omitted from a call
    ARGS: ClassVar[tuple[tuple[str, str], ...]] = ()
    # fields that hold free-text element descriptions (normalized for equality)
    DESCRIPTIVE: ClassVar[tuple[str, ...]] = ()

    @property
    def is_ui(self) -> bool:
        return self.category in ("gui", "navigation", "keyboard") or isinstance(self, SetCellValues)

    @property
    def is_terminal(self) -> bool:
        return isinstance(self, (Done, Fail))

    def values(self) -> list[Any]:
        return [getattr(self, f.name) for f in fields(self)]


def _check_str(value: Any, name: str, allow_empty: bool = False) -> str:
    if not isinstance(value, str):
        raise ActionArgumentError(f"{name} must be a string, got {type(value).__name__}")
    if not allow_empty and not value.strip():
        raise ActionArgumentError(f"{name} must be non-empty")
    return value


def _check_int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ActionArgumentError(f"{name} must be an integer")
    return value


def _check_bool(value: Any, name: str) -> bool:
    if not isinstance(value, bool):
        raise ActionArgumentError(f"{name} must be True or False")
    return value


@dataclass(frozen=True)
class Click(Action):
    name: ClassVar[str] = "click"
    category: ClassVar[str] = "gui"
    ARGS: ClassVar = (("target", "str"), ("count", "int"), ("button", "str"), ("modifiers", "keys?"))
    DESCRIPTIVE: ClassVar = ("target",)

    target: str
    count: int = 1
    button: str = "left"
    modifiers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _check_str(self.target, "target")
        if _check_int(self.count, "count") < 1:
            raise ActionArgumentError("click count must be >= 1")
        if _check_str(self.button, "button").lower() not in MOUSE_BUTTONS:
            raise ActionArgumentError(f"unknown mouse button {self.button!r}")
        object.__setattr__(self, "button", self.button.lower())
        object.__setattr__(self, "modifiers", _keys(self.modifiers, "modifiers") if self.modifiers else ())


@dataclass(frozen=True)
class DoubleClick(Action):
    name: ClassVar[str] = "double_click"
    category: ClassVar[str] = "gui"
    ARGS: ClassVar = (("target", "str"),)
    DESCRIPTIVE: ClassVar = ("target",)

    target: str

    def __post_init__(self) -> None:
        _check_str(self.target, "target")


@dataclass(frozen=True)
class Type(Action):
    name: ClassVar[str] = "type"
    category: ClassVar[str] = "gui"
    ARGS: ClassVar = (("target", "str?"), ("text", "str?"), ("overwrite", "bool"), ("submit", "bool"))
    DESCRIPTIVE: ClassVar = ("target",)

    target: str
    text: str
    overwrite: bool = False
    submit: bool = False

    def __post_init__(self) -> None:
        # empty target means "the focused field"
        _check_str(self.target, "target", allow_empty=True)
        _check_str(self.text, "text", allow_empty=True)
        _check_bool(self.overwrite, "overwrite")
        _check_bool(self.submit, "submit")


@dataclass(frozen=True)
class DragAndDrop(Action):
    name: ClassVar[str] = "drag_and_drop"
    category: ClassVar[str] = "gui"
    ARGS: ClassVar = (("source", "str"), ("destination", "str"))
    DESCRIPTIVE: ClassVar = ("source", "destination")

    source: str
    destination: str

    def __post_init__(self) -> None:
        _check_str(self.source, "source")
        _check_str(self.destination, "destination")


@dataclass(frozen=True)
class HighlightTextSpan(Action):
    name: ClassVar[str] = "highlight_text_span"
    category: ClassVar[str] = "gui"
    ARGS: ClassVar = (("start_phrase", "str"), ("end_phrase", "str"))
    DESCRIPTIVE: ClassVar = ("start_phrase", "end_phrase")

    start_phrase: str
    end_phrase: str

    def __post_init__(self) -> None:
        _check_str(self.start_phrase, "start_phrase")
        _check_str(self.end_phrase, "end_phrase")


@dataclass(frozen=True)
class Scroll(Action):
    name: ClassVar[str] = "scroll"
    category: ClassVar[str] = "gui"
    ARGS: ClassVar = (("target", "str"), ("amount", "int"), ("axis", "str"))
    DESCRIPTIVE: ClassVar = ("target",)

    target: str
    amount: int
    axis: str = "vertical"

    def __post_init__(self) -> None:
        _check_str(self.target, "target")
        _check_int(self.amount, "amount")
        if _check_str(self.axis, "axis").lower() not in SCROLL_AXES:
            raise ActionArgumentError(f"unknown scroll axis {self.axis!r}")
        object.__setattr__(self, "axis", self.axis.lower())


@dataclass(frozen=True)
class Open(Action):
    name: ClassVar[str] = "open"
    category: ClassVar[str] = "navigation"
    ARGS: ClassVar = (("app_or_file", "str"),)
    DESCRIPTIVE: ClassVar = ("app_or_file",)

    app_or_file: str

    def __post_init__(self) -> None:
        _check_str(self.app_or_file, "app_or_file")


@dataclass(frozen=True)
class SwitchApplications(Action):
    name: ClassVar[str] = "switch_applications"
    category: ClassVar[str] = "navigation"
    ARGS: ClassVar = (("app",  "str"),)
    DESCRIPTIVE: ClassVar = ("app",)

    app: str

    def __post_init__(self) -> None:
        _check_str(self.app, "app")


@dataclass(frozen=True)
class Hotkey(Action):
    name: ClassVar[str] = "hotkey"
    category: ClassVar[str] = "keyboard"
    ARGS: ClassVar = (("keys", "keys*"),)

    keys: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "keys", _keys(self.keys, "keys"))


@dataclass(frozen=True)
class HoldAndPress(Action):
    name: ClassVar[str] = "hold_and_press"
    category: ClassVar[str] = "keyboard"
    ARGS: ClassVar = (("hold_keys", "keys"), ("press_keys", "keys"))

    hold_keys: tuple[str, ...]
    press_keys: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "hold_keys", _keys(self.hold_keys, "hold_keys"))
        object.__setattr__(self, "press_keys", _keys(self.press_keys, "press_keys"))


@dataclass(frozen=True)
class CallCodeAgent(Action):
    name: ClassVar[str] = "call_code_agent"
    category: ClassVar[str] = "tool"
    ARGS: ClassVar = (("task", "str"),)

    task: str

    def __post_init__(self) -> None:
        _check_str(self.task, "task")


@dataclass(frozen=True)
class CallSearchAgent(Action):
    name: ClassVar[str] = "call_search_agent"
    category: ClassVar[str] = "tool"
    ARGS: ClassVar = (("query", "str"),)

    query: str

    def __post_init__(self) -> None:
        _check_str(self.query, "query")


@dataclass(frozen=True)
class SetCellValues(Action):
    name: ClassVar[str] = "set_cell_values"
    category: ClassVar[str] = "tool"
    ARGS: ClassVar = (("cells", "cells"),)

    # (cell reference, value) pairs in the order given
    cells: tuple[tuple[str, Any], ...]

    def __post_init__(self) -> None:
        cells = self.cells
        if isinstance(cells, dict):
            cells = tuple(cells.items())
        if not isinstance(cells, (list, tuple)) or not cells:
            raise ActionArgumentError("cells must be a non-empty mapping")
        out = []
        for pair in cells:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ActionArgumentError("cells must map references to values")
            ref, val = pair
            _check_str(ref, "cell reference")
            if isinstance(val, bool) or not isinstance(val, (str, int, float)):
                raise ActionArgumentError("cell values must be strings or numbers")
            out.append((ref, val))
        if len({r for r, _ in out}) != len(out):
            raise ActionArgumentError("duplicate cell reference")
        object.__setattr__(self, "cells", tuple(out))


@dataclass(frozen=True)
class Wait(Action):
    name: ClassVar[str] = "wait"
    category: ClassVar[str] = "terminal"
    ARGS: ClassVar = (("seconds", "num"),)

    seconds: float

    def __post_init__(self) -> None:
        if isinstance(self.seconds, bool) or not isinstance(self.seconds, (int, float)):
            raise ActionArgumentError("wait seconds must be a number")
        if not self.seconds > 0 or self.seconds != self.seconds or self.seconds == float("inf"):
            raise ActionArgumentError("wait seconds must be a positive finite number")


@dataclass(frozen=True)
class Done(Action):
    name: ClassVar[str] = "done"
    category: ClassVar[str] = "terminal"


@dataclass(frozen=True)
class Fail(Action):
    name: ClassVar[str] = "fail"
    category: ClassVar[str] = "terminal"


ACTION_TYPES: dict[str, type[Action]] = {
    cls.name: cls
    for cls in (
        Click, DoubleClick, Type, DragAndDrop, HighlightTextSpan, Scroll, Open,
        SwitchApplications, Hotkey, HoldAndPress, CallCodeAgent, CallSearchAgent,
        SetCellValues, Wait, Done, Fail,
    )
}

SAVE_CHORDS = {("ctrl", "s"), ("ctrl", "shift", "s"), ("ctrl", "e"), ("ctrl", "shift", "e")}
_EXPORT_RE = re.compile(r"\b(export|save|saved)\b|\.(pdf|svg|png|csv|docx|xlsx|odt|ods|odp)\b", re.I)


def is_save_like(action: Action) -> bool:
    if isinstance(action, Hotkey):
        return tuple(action.keys) in SAVE_CHORDS
    if isinstance(action, Open):
        return bool(_EXPORT_RE.search(action.app_or_file))
    return False


def action_fingerprint(action: Optional[Action]) -> Optional[str]:
    """Canonical identity used for repetition counting and blacklists.

    Description fields compare after whitespace/case normalization; all other
    parameters compare exactly. ``None`` (no parsed action) has no fingerprint.
    """
    if action is None:
        return None
    parts: list[Any] = [action.name]
    for f in fields(action):
        v = getattr(action, f.name)
        if f.name in action.DESCRIPTIVE:
            v = normalize_text(v)
        elif f.name == "cells":
            v = sorted([str(r), int(val) if isinstance(val, float) and val.is_integer() else val] for r, val in v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, float) and v.is_integer():
            v = int(v)
        parts.append(v)
    return json.dumps(parts, ensure_ascii=False, separators=(",", ":"))


def action_targets(action: Action) -> list[str]:
    """Descriptions that need grounding, in event order."""
    return [getattr(action, n) for n in action.DESCRIPTIVE if getattr(action, n, "")]


# one-line usage notes shown to the Manager, in action-space order
ACTION_DOCS: dict[str, tuple[str, str]] = {
    "click": ('click(target, count=1, button="left", modifiers=[])', "click a described element"),
    "double_click": ("double_click(target)", "double-click a described element"),
    "type": ("type(target, text, overwrite=False, submit=False)",
             'type into a described field ("" = focused field); submit presses Enter'),
    "drag_and_drop": ("drag_and_drop(source, destination)", "drag one described element onto another"),
    "highlight_text_span": ("highlight_text_span(start_phrase, end_phrase)",
                            "select the text running from one phrase to another"),
    "scroll": ('scroll(target, amount, axis="vertical")', "scroll inside a described element"),
    "open": ("open(app_or_file)", "launch an application or open a file by name"),
    "switch_applications": ("switch_applications(app)", "bring an open application to the front"),
    "hotkey": ("hotkey(*keys)", 'press a key chord, e.g. hotkey("ctrl", "s")'),
    "hold_and_press": ("hold_and_press(hold_keys, press_keys)", "hold some keys while pressing others"),
    "call_code_agent": ("call_code_agent(task)", "delegate a scripted task to the code agent"),
    "call_search_agent": ("call_search_agent(query)", "ask one how-to question"),
    "set_cell_values": ("set_cell_values({cell: value, ...})", "write spreadsheet cells directly"),
    "wait": ("wait(seconds)", "pause and let the screen settle"),
    "done": ("done()", "declare the task complete"),
    "fail": ("fail()", "declare the task infeasible"),
}
