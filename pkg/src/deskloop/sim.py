"""Deterministic simulated desktop.

A world is a YAML document describing screens of labeled elements and the
transitions that input events trigger. The schema (``WORLD_SCHEMA``) is
checked on load, followed by semantic checks such as "every ``goto`` target
exists". See ``docs/worlds.md`` for a walkthrough of the format.

Success conditions are evaluated only by the harness: they never reach a
prompt.
"""

from __future__ import annotations

import copy
import fnmatch
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Protocol

import jsonschema
import yaml

from .actions import normalize_text
from .core import FRAME_SIZE, InputEvent, Observation, UIElement
from .errors import WorldLoadError

logger = logging.getLogger(__name__)

ELEMENT_KINDS = ("button", "toggle", "field", "menu", "text")
EVENT_NAMES = (
    "click", "double_click", "right_click", "type", "submit", "drag", "select",
    "scroll", "hotkey", "open", "switch", "cells",
)

_CONDITION = {
    "type": "object",
    "properties": {
        "description": {"type": "string"},
        "screen": {"type": "string"},
        "element": {"type": "string"},
        "visible": {"type": "boolean"},
        "state": {"type": ["string", "null"]},
        "content": {"type": "string"},
        "contains": {"type": "string"},
        "file": {"type": "string"},
        "exists": {"type": "boolean"},
        "attr": {"type": "string"},
        "equals": {},
        "file_glob": {"type": "string"},
        "count": {"type": "integer", "minimum": 0},
        "flag": {"type": "string"},
    },
    "additionalProperties": False,
}

_TARGET_REF = {
    "oneOf": [
        {"type": "string"},
        {
            "type": "object",
            "properties": {"element": {"type": "string"}, "screen": {"type": "string"}},
            "required": ["element"],
            "additionalProperties": False,
        },
    ]
}

_EFFECT = {
    "type": "object",
    "minProperties": 1,
    "maxProperties": 1,
    "properties": {
        "goto": {"type": "string"},
        "set": {
            "type": "object",
            "properties": {
                "element": {"type": "string"},
                "screen": {"type": "string"},
                "state": {"type": ["string", "null"]},
                "content": {"type": "string"},
            },
            "required": ["element"],
            "additionalProperties": False,
        },
        "show": _TARGET_REF,
        "hide": _TARGET_REF,
        "write_file": {
            "type": "object",
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "attrs": {"type": "object"},
                "content": {"type": "string"},
                "content_from": {"type": "string"},
            },
            "required": ["name"],
            "additionalProperties": False,
        },
        "delete_file": {"type": "string"},
        "flag": {"type": "object", "minProperties": 1},
        "unstable": {"type": "boolean"},
        "noop": {"type": "boolean"},
    },
    "additionalProperties": False,
}

_TRANSITION = {
    "type": "object",
    "properties": {
        "on": {"enum": list(EVENT_NAMES)},
        "target": {"type": "string"},
        "dest": {"type": "string"},
        "keys": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "name": {"type": "string"},
        "text": {"type": "string"},
        "when": {"type": "array", "items": _CONDITION},
        "effects": {"type": "array", "items": _EFFECT},
    },
    "required": ["on", "effects"],
    "additionalProperties": False,
}

_ELEMENT = {
    "type": "object",
    "properties": {
        "label": {"type": "string", "minLength": 1},
        "bbox": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 4, "maxItems": 4},
        "kind": {"enum": list(ELEMENT_KINDS)},
        "state": {"type": ["string", "null"]},
        "states": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "content": {"type": "string"},
        "hidden": {"type": "boolean"},
        "trap": {"type": "boolean"},
    },
    "required": ["label"],
    "additionalProperties": False,
}

WORLD_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "initial": {"type": "string"},
        "files": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {"attrs": {"type": "object"}, "content": {"type": "string"}},
                "additionalProperties": False,
            },
        },
        "flags": {"type": "object"},
        "screens": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "title": {"type": "string"},
                    "description": {"type": "string"},
                    "stable": {"type": "boolean"},
                    "show_files": {"type": "boolean"},
                    "elements": {"type": "array", "items": _ELEMENT},
                    "transitions": {"type": "array", "items": _TRANSITION},
                },
                "additionalProperties": False,
            },
        },
        "global_transitions": {"type": "array", "items": _TRANSITION},
        "success": {"type": "array", "items": _CONDITION, "minItems": 1},
    },
    "required": ["initial", "screens", "success"],
    "additionalProperties": False,
}

# automatic layout for elements declared without a bbox
_LAYOUT_X0, _LAYOUT_X1, _LAYOUT_Y0, _LAYOUT_ROW, _LAYOUT_H = 80, 1200, 60, 48, 40


@dataclass(frozen=True)
class World:
    """A validated, immutable world template."""

    name: str
    initial: str
    screens: dict[str, dict]
    files: dict[str, dict] = field(default_factory=dict)
    flags: dict[str, Any] = field(default_factory=dict)
    global_transitions: tuple[dict, ...] = ()
    success: tuple[dict, ...] = ()
    description: str = ""
    source: str = ""

    def element_spec(self, screen: str, label: str) -> Optional[dict]:
        for el in self.screens[screen]["elements"]:
            if el["label"] == label:
                return el
        return None


def _path_str(path) -> str:
    return "/" + "/".join(str(p) for p in path)


def _semantic_errors(doc: dict) -> list[tuple[str, str]]:
    errs: list[tuple[str, str]] = []
    screens = doc["screens"]
    if doc["initial"] not in screens:
        errs.append(("/initial", f"initial screen {doc['initial']!r} is not defined"))
    labels_anywhere = {el["label"] for s in screens.values() for el in s.get("elements", [])}

    def check_label(label: str, screen: Optional[str], where: str) -> None:
        if screen is not None:
            if screen not in screens:
                errs.append((where, f"screen {screen!r} is not defined"))
            elif label not in {el["label"] for el in screens[screen].get("elements", [])}:
                errs.append((where, f"element {label!r} not on screen {screen!r}"))
        elif label not in labels_anywhere:
            errs.append((where, f"element {label!r} is not defined on any screen"))

    def check_transition(tr: dict, where: str, own: Optional[str]) -> None:
        for key in ("target", "dest"):
            if key in tr:
                check_label(tr[key], own, f"{where}/{key}")
        for j, eff in enumerate(tr.get("effects", [])):
            ew = f"{where}/effects/{j}"
            if "goto" in eff and eff["goto"] not in screens:
                errs.append((ew + "/goto", f"transition target screen {eff['goto']!r} is not defined"))
            for key in ("set", "show", "hide"):
                if key in eff:
                    ref = eff[key]
                    if isinstance(ref, str):
                        check_label(ref, None, f"{ew}/{key}")
                    else:
                        check_label(ref["element"], ref.get("screen"), f"{ew}/{key}")
            wf = eff.get("write_file")
            if wf and "content_from" in wf:
                check_label(wf["content_from"], None, f"{ew}/write_file/content_from")

    for sid, scr in screens.items():
        seen: set[str] = set()
        for i, el in enumerate(scr.get("elements", [])):
            if "bbox" in el:
                x0, y0, x1, y1 = el["bbox"]
                w, h = FRAME_SIZE
                if not (x0 < x1 <= w and y0 < y1 <= h):
                    errs.append((f"/screens/{sid}/elements/{i}/bbox", "bbox must lie within the 1920x1080 frame"))
            if el["label"] in seen:
                logger.debug("screen %s repeats label %r", sid, el["label"])
            seen.add(el["label"])
            if el.get("kind") == "toggle" and "states" in el and "state" in el and el["state"] not in el["states"]:
                errs.append((f"/screens/{sid}/elements/{i}/state", "toggle state must be one of its states"))
        for i, tr in enumerate(scr.get("transitions", [])):
            check_transition(tr, f"/screens/{sid}/transitions/{i}", sid)
    for i, tr in enumerate(doc.get("global_transitions", [])):
        check_transition(tr, f"/global_transitions/{i}", None)
    for i, cond in enumerate(doc["success"]):
        if "screen" in cond and cond["screen"] not in screens:
            errs.append((f"/success/{i}/screen", f"screen {cond['screen']!r} is not defined"))
    return errs


def parse_world(doc: Any, source: str = "") -> World:
    if not isinstance(doc, dict):
        raise WorldLoadError("world document must be a mapping", "/")
    validator = jsonschema.Draft202012Validator(WORLD_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise WorldLoadError(err.message, _path_str(err.absolute_path))
    sem = _semantic_errors(doc)
    if sem:
        path, msg = sem[0]
        raise WorldLoadError(msg, path)
    screens = {}
    for sid, scr in doc["screens"].items():
        els = []
        for i, el in enumerate(scr.get("elements", [])):
            el = dict(el)
            el.setdefault("kind", "text")
            if "bbox" not in el:
                y0 = _LAYOUT_Y0 + i * _LAYOUT_ROW
                el["bbox"] = [_LAYOUT_X0, y0, _LAYOUT_X1, y0 + _LAYOUT_H]
                if y0 + _LAYOUT_H > FRAME_SIZE[1]:
                    raise WorldLoadError("too many elements for automatic layout", f"/screens/{sid}/elements/{i}")
            if el["kind"] == "toggle" and "states" in el:
                el.setdefault("state", el["states"][0])
            if el["kind"] == "field":
                el.setdefault("content", "")
            els.append(el)
        screens[sid] = {
            "title": scr.get("title", sid),
            "description": scr.get("description", ""),
            "stable": scr.get("stable", True),
            "show_files": scr.get("show_files", False),
            "elements": els,
            "transitions": list(scr.get("transitions", [])),
        }
    return World(
        name=doc.get("name", Path(source).stem if source else "world"),
        initial=doc["initial"],
        screens=screens,
        files={k: {"attrs": dict(v.get("attrs", {})), "content": v.get("content", "")}
               for k, v in (doc.get("files") or {}).items()},
        flags=dict(doc.get("flags") or {}),
        global_transitions=tuple(doc.get("global_transitions", [])),
        success=tuple(doc["success"]),
        description=doc.get("description", ""),
        source=source,
    )


class _WorldLoader(yaml.SafeLoader):
    """SafeLoader with YAML 1.2 booleans, so a key like ``on`` stays a string."""


_WorldLoader.yaml_implicit_resolvers = {
    ch: [(tag, rx) for tag, rx in resolvers if tag != "tag:yaml.org,2002:bool"]
    for ch, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_WorldLoader.add_implicit_resolver(
    "tag:yaml.org,2002:bool", re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"), list("tTfF"))


def load_world(path) -> World:
    """Load and validate a world file; errors name the offending field path."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise WorldLoadError(f"cannot read world file: {exc.strerror}", str(p)) from None
    try:
        doc = yaml.load(text, Loader=_WorldLoader)
    except yaml.YAMLError as exc:
        raise WorldLoadError(f"YAML syntax error: {exc}", "/") from None
    return parse_world(doc, p.name)


def shipped_worlds_dir() -> Path:
    return Path(str(resources.files("deskloop").joinpath("worlds")))


# -- runtime -------------------------------------------------------------------


class Environment(Protocol):
    """What the orchestrator needs from a desktop."""

    def observe(self, step_index: int) -> Observation: ...
    def execute(self, event: InputEvent) -> str: ...
    def evaluate_success(self) -> bool: ...


class SimDesktop:
    """Mutable run-time state of one world. One instance per task run."""

    def __init__(self, world: World):
        self.world = world
        self.reset()

    def reset(self) -> None:
        w = self.world
        self.screen = w.initial
        self.elements: dict[str, list[dict]] = {
            sid: [copy.deepcopy(el) for el in scr["elements"]] for sid, scr in w.screens.items()
        }
        self.files: dict[str, dict] = copy.deepcopy(w.files)
        self.flags: dict[str, Any] = copy.deepcopy(w.flags)
        self.focus: Optional[str] = None
        self.unstable = not w.screens[w.initial]["stable"]
        self.events: list[dict] = []

    # -- observation ---------------------------------------------------------

    def _visible(self, screen: Optional[str] = None) -> list[dict]:
        return [el for el in self.elements[screen or self.screen] if not el.get("hidden")]

    def _visible_state(self) -> dict:
        scr = self.world.screens[self.screen]
        state: dict[str, Any] = {
            "screen": self.screen,
            "elements": [[el["label"], el["kind"], el.get("state"), el.get("content")] for el in self._visible()],
        }
        if scr["show_files"]:
            state["files"] = [[name, self.files[name]["attrs"]] for name in sorted(self.files)]
        return state

    def digest(self) -> str:
        blob = json.dumps(self._visible_state(), sort_keys=True, ensure_ascii=False, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def describe(self) -> str:
        scr = self.world.screens[self.screen]
        lines = [f"Window: {scr['title']}"]
        if scr["description"]:
            lines.append(scr["description"].strip())
        lines.append("Visible elements:")
        for el in self._visible():
            extra = ""
            if el.get("state") is not None:
                extra += f" (state: {el['state']})"
            if el.get("content") is not None and el["kind"] in ("field", "text") and el["content"] != "":
                extra += f" [{el['content']}]"
            lines.append(f"- {el['kind']} \"{el['label']}\"{extra}")
        if scr["show_files"]:
            lines.append("Files:" + ("" if self.files else " (none)"))
            for name in sorted(self.files):
                lines.append(f"- {name}")
        if self.unstable:
            lines.append("(the window is still loading)")
        return "\n".join(lines)

    def observe(self, step_index: int) -> Observation:
        scr = self.world.screens[self.screen]
        els = tuple(
            UIElement(el["label"], tuple(el["bbox"]), el["kind"], el.get("state"), el.get("content"))
            for el in self._visible()
        )
        files = tuple(sorted(self.files)) if scr["show_files"] else ()
        return Observation(
            step_index=step_index,
            screen_digest=self.digest(),
            elements=els,
            image_ref=f"sim://{self.world.name}/{step_index}",
            stable=not self.unstable,
            description=self.describe(),
            files=files,
        )

    # -- events ----------------------------------------------------------------

    def _element_at(self, point: Optional[tuple[int, int]]) -> Optional[dict]:
        if point is None:
            return None
        x, y = point
        for el in self._visible():
            x0, y0, x1, y1 = el["bbox"]
            if x0 <= x < x1 and y0 <= y < y1:
                return el
        return None

    def _find(self, label: str, screen: Optional[str] = None) -> Optional[dict]:
        for el in self.elements[screen or self.screen]:
            if el["label"] == label:
                return el
        return None

    def _transitions(self) -> list[dict]:
        return list(self.world.screens[self.screen]["transitions"]) + list(self.world.global_transitions)

    def _fire(self, on: str, target: Optional[str] = None, dest: Optional[str] = None,
              keys: tuple[str, ...] = (), name: str = "", text: Optional[str] = None) -> bool:
        fired = False
        for tr in self._transitions():
            if tr["on"] != on:
                continue
            if "target" in tr and (target is None or normalize_text(tr["target"]) != normalize_text(target)):
                continue
            if "dest" in tr and (dest is None or normalize_text(tr["dest"]) != normalize_text(dest)):
                continue
            if "keys" in tr and sorted(k.lower() for k in tr["keys"]) != sorted(keys):
                continue
            if "name" in tr and normalize_text(tr["name"]) not in normalize_text(name):
                continue
            if "text" in tr and (text is None or normalize_text(tr["text"]) not in normalize_text(text)):
                continue
            if not all(self._holds(c) for c in tr.get("when", ())):
                continue
            self._apply(tr["effects"])
            fired = True
            break  # first matching transition wins
        return fired

    def _apply(self, effects: list[dict]) -> None:
        for eff in effects:
            if "goto" in eff:
                self.screen = eff["goto"]
                self.focus = None
                self.unstable = not self.world.screens[self.screen]["stable"]
            elif "set" in eff:
                spec = eff["set"]
                el = self._find(spec["element"], spec.get("screen"))
                if el is not None:
                    if "state" in spec:
                        el["state"] = spec["state"]
                    if "content" in spec:
                        el["content"] = spec["content"]
            elif "show" in eff or "hide" in eff:
                ref = eff.get("show", eff.get("hide"))
                label, screen = (ref, None) if isinstance(ref, str) else (ref["element"], ref.get("screen"))
                el = self._find(label, screen)
                if el is not None:
                    el["hidden"] = "hide" in eff
            elif "write_file" in eff:
                wf = eff["write_file"]
                content = wf.get("content", "")
                if "content_from" in wf:
                    src = self._find(wf["content_from"]) or self._find_anywhere(wf["content_from"])
                    content = (src or {}).get("content") or ""
                entry = self.files.setdefault(wf["name"], {"attrs": {}, "content": ""})
                entry["attrs"].update(wf.get("attrs", {}))
                entry["content"] = content
            elif "delete_file" in eff:
                self.files.pop(eff["delete_file"], None)
            elif "flag" in eff:
                self.flags.update(eff["flag"])
            elif "unstable" in eff:
                self.unstable = bool(eff["unstable"])

    def _find_anywhere(self, label: str) -> Optional[dict]:
        for sid in self.elements:
            el = self._find(label, sid)
            if el is not None:
                return el
        return None

    def execute(self, event: InputEvent) -> str:
        """Apply one input event. Returns a note ("" when something matched)."""
        self.events.append({"kind": event.kind})
        handler = getattr(self, f"_on_{event.kind}", None)
        if handler is None:
            raise ValueError(f"unknown event kind {event.kind!r}")
        return handler(event)

    def _on_click(self, ev: InputEvent) -> str:
        el = self._element_at(ev.point)
        if el is None:
            return "missed-click"
        if el.get("trap"):
            return "absorbed"
        if el["kind"] == "field":
            self.focus = el["label"]
        if el["kind"] == "toggle" and el.get("states"):
            states = el["states"]
            el["state"] = states[(states.index(el["state"]) + 1) % len(states)]
        on = "right_click" if ev.button == "right" else "double_click" if ev.count >= 2 else "click"
        fired = self._fire(on, target=el["label"])
        if not fired and on == "double_click":
            fired = self._fire("click", target=el["label"])
        return ""

    def _on_type(self, ev: InputEvent) -> str:
        el = self._element_at(ev.point) if ev.point is not None else (
            self._find(self.focus) if self.focus else None)
        if el is None or el["kind"] != "field":
            return "missed-field"
        if el.get("trap"):
            return "absorbed"
        self.focus = el["label"]
        el["content"] = ev.text if ev.overwrite else (el.get("content") or "") + ev.text
        self._fire("type", target=el["label"], text=el["content"])
        if ev.submit:
            self._fire("submit", target=el["label"], text=el["content"])
        return ""

    def _on_drag(self, ev: InputEvent) -> str:
        src, dst = self._element_at(ev.point), self._element_at(ev.point2)
        if src is None or dst is None:
            return "missed-click"
        if src.get("trap") or dst.get("trap"):
            return "absorbed"
        self._fire("drag", target=src["label"], dest=dst["label"])
        return ""

    def _on_select(self, ev: InputEvent) -> str:
        el = self._element_at(ev.point)
        if el is None or el is not self._element_at(ev.point2):
            return "missed-click"
        text = el.get("content") or el["label"]
        start, end = char_offset(el["bbox"], text, ev.point[0]), char_offset(el["bbox"], text, ev.point2[0])
        if end < start:
            start, end = end, start
        selected = text[start:end]
        el["state"] = f"selected: {selected}"
        self._fire("select", target=el["label"], text=selected)
        return ""

    def _on_scroll(self, ev: InputEvent) -> str:
        el = self._element_at(ev.point)
        if el is None:
            return "missed-click"
        self._fire("scroll", target=el["label"])
        return ""

    def _on_hotkey(self, ev: InputEvent) -> str:
        keys = tuple(sorted(k.lower() for k in ev.keys))
        if self._fire("hotkey", keys=keys):
            return ""
        if keys == ("enter",) and self.focus:
            el = self._find(self.focus)
            if el is not None and self._fire("submit", target=self.focus, text=el.get("content") or ""):
                return ""
        return ""

    def _on_open(self, ev: InputEvent) -> str:
        return "" if self._fire("open", name=ev.text) else "nothing-opened"

    def _on_switch(self, ev: InputEvent) -> str:
        return "" if self._fire("switch", name=ev.text) else "nothing-opened"

    def _on_cells(self, ev: InputEvent) -> str:
        missing = []
        for ref, value in ev.cells:
            el = self._find(ref)
            if el is None or el.get("hidden") or el["kind"] != "field":
                missing.append(ref)
                continue
            el["content"] = str(value)
        self._fire("cells")
        return "missing-cells: " + ", ".join(missing) if missing else ""

    def _on_wait(self, ev: InputEvent) -> str:
        self.unstable = False
        return ""

    def wait(self, seconds: float) -> None:
        self.execute(InputEvent("wait", seconds=seconds))

    # -- files shared with the code agent ------------------------------------------

    def sync_files(self, working_dir) -> list[str]:
        """Import files created in a code-session working directory."""
        root = Path(working_dir)
        changed = []
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames.sort()
            for fn in sorted(filenames):
                p = Path(dirpath) / fn
                rel = p.relative_to(root).as_posix()
                try:
                    content = p.read_text(encoding="utf-8", errors="replace")[:65536]
                except OSError:
                    continue
                entry = self.files.get(rel)
                if entry is None or entry["content"] != content:
                    self.files[rel] = {"attrs": dict((entry or {}).get("attrs", {})), "content": content}
                    changed.append(rel)
        return changed

    # -- ground truth ---------------------------------------------------------------

    def _holds(self, cond: dict) -> bool:
        if "element" in cond:
            el = self._find(cond["element"], cond.get("screen"))
            if el is None:
                return False
            if "screen" not in cond and "visible" not in cond and el.get("hidden"):
                return False
            if "visible" in cond and bool(not el.get("hidden")) != cond["visible"]:
                return False
            if "state" in cond and el.get("state") != cond["state"]:
                return False
            if "content" in cond and (el.get("content") or "") != cond["content"]:
                return False
            if "contains" in cond and normalize_text(cond["contains"]) not in normalize_text(el.get("content") or ""):
                return False
            return True
        if "screen" in cond and self.screen != cond["screen"]:
            return False
        if "file" in cond:
            entry = self.files.get(cond["file"])
            if entry is None:
                return cond.get("exists", True) is False
            if cond.get("exists", True) is False:
                return False
            if "attr" in cond and entry["attrs"].get(cond["attr"]) != cond.get("equals", True):
                return False
            if "contains" in cond and cond["contains"] not in entry["content"]:
                return False
        if "file_glob" in cond:
            n = sum(1 for name in self.files if fnmatch.fnmatchcase(name, cond["file_glob"]))
            if n != cond.get("count", n if n else -1):
                return False
        if "flag" in cond and self.flags.get(cond["flag"]) != cond.get("equals", True):
            return False
        return True

    def unmet_conditions(self) -> list[str]:
        out = []
        for i, cond in enumerate(self.world.success):
            if not self._holds(cond):
                out.append(cond.get("description") or f"success condition {i + 1} does not hold")
        return out

    def evaluate_success(self) -> bool:
        return not self.unmet_conditions()


def char_offset(bbox, text: str, x: int) -> int:
    """Character index under horizontal position ``x`` of a text element."""
    x0, _, x1, _ = bbox
    n = len(text)
    if n == 0:
        return 0
    return max(0, min(n, round((x - x0) * n / (x1 - x0))))


def char_anchor(bbox, text: str, index: int) -> int:
    """Horizontal position of character ``index``; inverse of :func:`char_offset`."""
    x0, _, x1, _ = bbox
    n = len(text)
    if n == 0:
        return x0
    return min(x1 - 1, x0 + round(index * (x1 - x0) / n))


# -- live mode -------------------------------------------------------------------


class LiveDesktop:
    """Interface placeholder for a real desktop driver.

    A concrete driver captures frames (``image_ref`` pointing to a PNG),
    computes :func:`perceptual_digest` of the frame, and injects mouse and
    keyboard events. Wiring to benchmark VMs is outside this package.
    """

    def observe(self, step_index: int) -> Observation:
        raise NotImplementedError("live desktop driver not configured")

    def execute(self, event: InputEvent) -> str:
        raise NotImplementedError("live desktop driver not configured")

    def evaluate_success(self) -> bool:
        raise NotImplementedError("live runs have no ground-truth evaluator")


def perceptual_digest(image_path, hash_size: int = 16) -> str:
    """Difference hash of a screenshot as a hex string (hash_size**2 bits)."""
    from PIL import Image

    with Image.open(image_path) as img:
        small = img.convert("L").resize((hash_size + 1, hash_size), Image.Resampling.LANCZOS)
        px = list(small.getdata())
    bits = 0
    for row in range(hash_size):
        base = row * (hash_size + 1)
        for col in range(hash_size):
            bits = (bits << 1) | (px[base + col] > px[base + col + 1])
    width = hash_size * hash_size // 4
    return f"{bits:0{width}x}"
