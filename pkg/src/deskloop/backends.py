"""Uniform completion interface over model providers.

All six roles go through :class:`Gateway`. Adapters do the transport: a live
HTTP adapter for OpenAI-compatible chat endpoints, a scripted adapter for
deterministic fixtures, an oracle judge for the simulated desktop, and a
replay adapter that serves a recorded transcript back verbatim.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Protocol, Sequence, Union

from .actions import normalize_text
from .core import Observation, SuccessCriterion, UIElement
from .errors import (
    BackendUnavailableError,
    ConfigError,
    EmptyOutputError,
    GroundingError,
    ReplayExhaustedError,
    TransportError,
)
from .language import ROLES, format_judge, format_manager_output, format_reflection

logger = logging.getLogger(__name__)

VERIFIER_TEMPERATURE = 0.2
DEFAULT_TEMPERATURE = 1.0
IMAGE_ROLES = ("manager", "reflection", "verifier", "grounder")


@dataclass(frozen=True)
class ImageRef:
    ref: str


Part = Union[str, ImageRef]


@dataclass(frozen=True)
class CompletionRequest:
    role: str
    system_text: str
    user_parts: tuple[Part, ...] = ()
    temperature: float = DEFAULT_TEMPERATURE
    max_output: int = 4096
    task_id: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError(f"temperature {self.temperature} outside [0, 2]")

    @property
    def prompt_text(self) -> str:
        texts = [self.system_text] + [p for p in self.user_parts if isinstance(p, str)]
        return "\n".join(texts)

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "system_text": self.system_text,
            "user_parts": [p if isinstance(p, str) else {"image_ref": p.ref} for p in self.user_parts],
            "temperature": self.temperature,
            "max_output": self.max_output,
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


class Adapter(Protocol):
    def complete(self, req: CompletionRequest) -> str: ...


# -- scripted fixtures ---------------------------------------------------------


class ScriptExhausted(BackendUnavailableError):
    pass


class ScriptedAdapter:
    """Serves fixture text keyed by (role, per-role call index).

    A script maps each role to a list of entries. An entry is plain text or a
    dict; dict entries may carry control keys:

    ``until``   hold this entry until the prompt contains the given text,
                then move on and answer with the next entry
    ``if``      choose ``then`` or ``else`` depending on whether the prompt
                contains the given text
    ``repeat``  serve this entry the given number of times

    Manager entries may use the ``do`` shorthand, rendered into the
    five-section format with the script's success ``criteria``. Reflection
    entries may use ``reflect: KEEP|SWITCH`` and verifier entries ``judge``.
    Content-hash ``overrides`` (sha256 of the prompt text) win over entries.
    """

    def __init__(self, script: Mapping[str, Any]):
        self.script = script
        self._cursor: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
        self._lock = threading.Lock()

    def _role_spec(self, role: str) -> dict:
        spec = self.script.get(role)
        if spec is None:
            raise ConfigError(f"script has no entries for role {role!r}")
        if isinstance(spec, list):
            return {"turns": spec}
        return spec

    def complete(self, req: CompletionRequest) -> str:
        spec = self._role_spec(req.role)
        prompt = req.prompt_text
        overrides = spec.get("overrides") or {}
        h = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        if h in overrides:
            return self._render(req.role, overrides[h], prompt, spec)
        turns = spec.get("turns", [])
        with self._lock:
            cur = self._cursor[(req.task_id, req.role)]
            while True:
                if cur[0] >= len(turns):
                    if "default" in spec:
                        return self._render(req.role, spec["default"], prompt, spec)
                    raise ScriptExhausted(f"script for {req.role!r} ran out after {len(turns)} entries")
                entry = turns[cur[0]]
                if isinstance(entry, dict) and "until" in entry and entry["until"] in prompt:
                    cur[0] += 1
                    cur[1] = 0
                    continue
                break
            if isinstance(entry, dict) and "until" in entry:
                pass  # stays on this entry
            else:
                cur[1] += 1
                reps = entry.get("repeat", 1) if isinstance(entry, dict) else 1
                if cur[1] >= reps:
                    cur[0] += 1
                    cur[1] = 0
        return self._render(req.role, entry, prompt, spec)

    def _render(self, role: str, entry: Any, prompt: str, spec: dict) -> str:
        if isinstance(entry, str):
            return entry
        if not isinstance(entry, dict):
            raise ConfigError(f"bad script entry for {role}: {entry!r}")
        if "if" in entry:
            branch = entry["then"] if entry["if"] in prompt else entry.get("else")
            if branch is None:
                raise ConfigError(f"conditional entry for {role} has no else branch")
            return self._render(role, branch, prompt, spec)
        if "text" in entry:
            return entry["text"]
        if "do" in entry:
            return _render_manager_turn(entry, spec.get("criteria", []))
        if "reflect" in entry:
            strategy = entry["reflect"]
            return format_reflection(strategy, loop=strategy.upper() == "SWITCH", reason=entry.get("reason", ""))
        if "judge" in entry:
            return format_judge(bool(entry["judge"]), entry.get("reason", ""), entry.get("missing", ""))
        raise ConfigError(f"script entry for {role} has nothing to say: {entry!r}")


def _render_manager_turn(entry: dict, statements: Sequence[Any]) -> str:
    met = entry.get("met", [])
    if met == "all":
        met = list(range(1, len(statements) + 1))
    evidence = entry.get("evidence", "visible on the current screen")
    crits = []
    for i, st in enumerate(statements, 1):
        exact = False
        if isinstance(st, dict):
            exact, st = bool(st.get("exact")), st["statement"]
        status = "met-with-evidence" if i in met else "unmet"
        crits.append(SuccessCriterion(i, st, exact, status, evidence if i in met else ""))
    decision = entry.get("decision", "DONE" if entry["do"].strip() == "agent.done()" else "CONTINUE")
    return format_manager_output(
        entry["do"],
        decision=decision,
        criteria=crits,
        screenshot_analysis=entry.get("analysis", "Current screen as described."),
        next_action=entry.get("say", ""),
        feasibility=entry.get("feasibility", "feasible"),
    )


# -- oracle judge (simulated desktop only) --------------------------------------


class OracleJudgeAdapter:
    """Verifier backed by the simulated desktop's ground-truth conditions.

    ``probe`` returns the descriptions of success conditions that do not hold
    right now; an empty list means the task is complete.
    """

    def __init__(self, probe: Callable[[], list[str]]):
        self.probe = probe

    def complete(self, req: CompletionRequest) -> str:
        missing = self.probe()
        if not missing:
            return format_judge(True, "every requirement is visibly satisfied", "")
        return format_judge(False, missing[0], "; ".join(missing))


# -- replay --------------------------------------------------------------------


class ReplayAdapter:
    """Serves responses from a recorded transcript in per-role call order."""

    def __init__(self, records: Sequence[dict]):
        self._by_key: dict[tuple[str, int], dict] = {}
        for r in records:
            self._by_key[(r["role"], r["index"])] = r
        self._counts: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def complete(self, req: CompletionRequest) -> str:
        with self._lock:
            idx = self._counts[req.role]
            self._counts[req.role] += 1
        rec = self._by_key.get((req.role, idx))
        if rec is None:
            raise ReplayExhaustedError(f"transcript has no {req.role!r} response #{idx}")
        if rec.get("request_digest") and rec["request_digest"] != req.digest:
            logger.warning("replayed %s request #%d differs from the recording", req.role, idx)
        if "error" in rec:
            raise BackendUnavailableError(rec["error"])
        return rec["response"]


# -- live HTTP -----------------------------------------------------------------


class HttpAdapter:
    """OpenAI-compatible ``/chat/completions`` transport."""

    def __init__(self, endpoint: str, model: str, api_key_env: str = "", timeout: float = 120.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout

    def _payload(self, req: CompletionRequest) -> dict:
        content: list[dict] = []
        for p in req.user_parts:
            if isinstance(p, ImageRef):
                if req.role in IMAGE_ROLES and p.ref.startswith(("http://", "https://", "data:")):
                    content.append({"type": "image_url", "image_url": {"url": p.ref}})
            else:
                content.append({"type": "text", "text": p})
        return {
            "model": self.model,
            "temperature": req.temperature,
            "max_tokens": req.max_output,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": content or [{"type": "text", "text": ""}]},
            ],
        }

    def complete(self, req: CompletionRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise ConfigError(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        body = json.dumps(self._payload(req)).encode("utf-8")
        http_req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(http_req, timeout=self.timeout) as resp:
                data = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code >= 500 or exc.code == 429:
                raise TransportError(f"HTTP {exc.code} from {self.endpoint}") from exc
            raise BackendUnavailableError(f"HTTP {exc.code} from {self.endpoint}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise TransportError(f"invalid JSON from {self.endpoint}") from exc
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("response lacks choices[0].message.content") from exc


# -- gateway -------------------------------------------------------------------


@dataclass
class BackendProfile:
    """Role to adapter-spec map plus transport settings.

    Adapter specs are dicts with a ``kind`` of ``http``, ``scripted``,
    ``oracle`` or ``replay``; ``http`` specs carry ``endpoint``, ``model`` and
    ``api_key_env``.
    """

    roles: dict[str, dict] = field(default_factory=dict)
    temperatures: dict[str, float] = field(default_factory=dict)
    retries: int = 3
    backoff_s: float = 0.5
    grounding: str = "sim"  # sim | model

    def temperature(self, role: str) -> float:
        if role in self.temperatures:
            return float(self.temperatures[role])
        return VERIFIER_TEMPERATURE if role == "verifier" else DEFAULT_TEMPERATURE

    def to_dict(self) -> dict:
        return {
            "roles": {r: {k: v for k, v in s.items() if k != "script"} for r, s in sorted(self.roles.items())},
            "temperatures": {r: self.temperature(r) for r in ROLES},
            "retries": self.retries,
            "grounding": self.grounding,
        }


class Gateway:
    def __init__(
        self,
        adapters: Mapping[str, Adapter],
        profile: Optional[BackendProfile] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.adapters = dict(adapters)
        self.profile = profile or BackendProfile()
        self._sleep = sleep
        self._lock = threading.Lock()
        self._transcripts: dict[str, list[dict]] = defaultdict(list)
        self._counts: dict[tuple[str, str], int] = defaultdict(int)

    def request(self, role: str, system_text: str, parts: Sequence[Part] = (), task_id: str = "",
                max_output: int = 4096) -> CompletionRequest:
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}")
        if role not in IMAGE_ROLES:
            parts = [p for p in parts if not isinstance(p, ImageRef)]
        return CompletionRequest(role, system_text, tuple(parts), self.profile.temperature(role), max_output, task_id)

    def complete(self, req: CompletionRequest) -> str:
        adapter = self.adapters.get(req.role)
        if adapter is None:
            raise ConfigError(f"no backend configured for role {req.role!r}")
        attempts = max(1, self.profile.retries)
        error: Optional[Exception] = None
        text: Optional[str] = None
        for attempt in range(attempts):
            try:
                text = adapter.complete(req)
                break
            except TransportError as exc:
                error = exc
                if attempt + 1 < attempts:
                    self._sleep(self.profile.backoff_s * (2 ** attempt))
            except BackendUnavailableError as exc:
                error = exc
                break
        with self._lock:
            idx = self._counts[(req.task_id, req.role)]
            self._counts[(req.task_id, req.role)] += 1
            rec = {"task_id": req.task_id, "role": req.role, "index": idx,
                   "request": req.to_dict(), "request_digest": req.digest}
            if text is None:
                rec["error"] = str(error)
            else:
                rec["response"] = text
            self._transcripts[req.task_id].append(rec)
        if text is None:
            raise BackendUnavailableError(f"{req.role} backend unavailable: {error}") from error
        if not text.strip():
            raise EmptyOutputError(f"{req.role} backend returned an empty response")
        return text

    def transcript(self, task_id: str = "") -> list[dict]:
        with self._lock:
            return list(self._transcripts.get(task_id, []))

    def search_grounded_query(self, query: str, system_text: Optional[str] = None, task_id: str = "") -> str:
        """One search-role round trip; the answer is returned as plain text."""
        if not query or not query.strip():
            raise ValueError("search query must be non-empty")
        prompt = system_text if system_text is not None else query
        return self.complete(self.request("search", prompt, [], task_id)).strip()

    def ground(self, description: str, obs: Observation, system_text: Optional[str] = None,
               task_id: str = "") -> tuple[int, int]:
        """Resolve an element description to a pixel coordinate on ``obs``."""
        if not description or not description.strip():
            raise GroundingError("empty target description")
        if self.profile.grounding == "sim":
            return label_ground(description, obs.elements).center
        prompt = system_text if system_text is not None else description
        text = self.complete(self.request("grounder", prompt, [ImageRef(obs.image_ref)], task_id))
        try:
            x, y = parse_coordinates(text)
        except GroundingError:
            if obs.elements:
                return label_ground(description, obs.elements).center
            raise
        w, h = obs.frame
        if not (0 <= x < w and 0 <= y < h):
            raise GroundingError(f"({x}, {y}) lies outside the {w}x{h} frame")
        return x, y


_COORD_RE = re.compile(r"\(?\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)?")


def parse_coordinates(text: str) -> tuple[int, int]:
    m = _COORD_RE.search(text or "")
    if not m:
        raise GroundingError(f"no coordinates in grounder output {text[:60]!r}")
    return int(round(float(m.group(1)))), int(round(float(m.group(2))))


def label_ground(description: str, elements: Sequence[UIElement]) -> UIElement:
    """Simulated grounder: resolve a description by label match.

    Exact (normalized) label matches win; otherwise the longest label that
    occurs in the description, or whose text contains the description, is
    chosen. Ties go to the earliest element in the list.
    """
    want = normalize_text(description)
    if not want:
        raise GroundingError("empty target description")
    for el in elements:
        if normalize_text(el.label) == want:
            return el
    best: Optional[UIElement] = None
    best_len = -1
    padded = f" {want} "
    for el in elements:
        lab = normalize_text(el.label)
        if not lab:
            continue
        if f" {lab} " in padded or want in lab:
            if len(lab) > best_len:
                best, best_len = el, len(lab)
    if best is None:
        raise GroundingError(f"no element matches {description!r}")
    return best


def build_adapter(spec: Mapping[str, Any], oracle_probe: Optional[Callable[[], list[str]]] = None,
                  replay_records: Optional[Sequence[dict]] = None) -> Adapter:
    kind = spec.get("kind")
    if kind == "scripted":
        return ScriptedAdapter(spec["script"])
    if kind == "oracle":
        if oracle_probe is None:
            raise ConfigError("oracle judge needs a simulated environment")
        return OracleJudgeAdapter(oracle_probe)
    if kind == "http":
        try:
            return HttpAdapter(spec["endpoint"], spec["model"], spec.get("api_key_env", ""),
                               float(spec.get("timeout", 120)))
        except KeyError as exc:
            raise ConfigError(f"http backend needs {exc.args[0]!r}") from None
    if kind == "replay":
        return ReplayAdapter(replay_records or [])
    raise ConfigError(f"unknown backend kind {kind!r}")
