"""On-demand tools: single-query search, sandboxed code sessions, target resolution."""

from __future__ import annotations

import logging
import os
import re
import shlex
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .actions import (
    Action,
    Click,
    DoubleClick,
    DragAndDrop,
    HighlightTextSpan,
    Hotkey,
    HoldAndPress,
    Open,
    Scroll,
    SetCellValues,
    SwitchApplications,
    Type,
    Wait,
)
from .core import BeliefState, InputEvent, Observation, UIElement, inject_knowledge
from .errors import BackendError, GroundingError, PolicyViolation
from .language import PromptTemplate, render_prompt

logger = logging.getLogger(__name__)

CODER_BUDGET = 20
COMMAND_TIMEOUT_S = 30.0
OUTPUT_LIMIT = 4000


# -- search ---------------------------------------------------------------------


def run_search(query: str, belief: BeliefState, gateway, template: Optional[PromptTemplate] = None,
               task_id: str = "") -> tuple[Optional[str], Optional[dict]]:
    """Ask the search role once and inject the answer as knowledge.

    Returns ``(text, None)`` on success or ``(None, annotation)`` when the
    backend fails; a failure never stops the run.
    """
    system = render_prompt(template, {"QUERY": query}) if template is not None else None
    try:
        text = gateway.search_grounded_query(query, system, task_id)
    except BackendError as exc:
        logger.warning("search failed: %s", exc)
        return None, {"kind": "empty-knowledge", "detail": str(exc)}
    inject_knowledge(belief, text)
    return text, None


# -- sandbox --------------------------------------------------------------------

_NETWORK_COMMANDS = {
    "curl", "wget", "ssh", "scp", "sftp", "rsync", "nc", "ncat", "netcat", "telnet", "ftp",
    "ping", "dig", "nslookup", "git", "pip", "pip3", "apt", "apt-get", "npm", "yarn",
}
_NETWORK_PY_RE = re.compile(r"\b(import|from)\s+(socket|urllib|http|requests|httpx|ftplib|smtplib|aiohttp)\b")
_PY_PATH_RE = re.compile(r"""(['"])((?:/|~|\.\./)[^'"\n]*)\1""")


@dataclass(frozen=True)
class SandboxPolicy:
    """Working-directory jail for code sessions.

    Commands run with the working directory as cwd and HOME. Before launch,
    every path-like token is resolved and must stay inside the directory;
    network tools are refused unless ``network_allowed``. This is a policy
    check, not an OS-level isolation boundary.
    """

    working_dir: str
    timeout_s: float = COMMAND_TIMEOUT_S
    network_allowed: bool = False

    @property
    def root(self) -> Path:
        return Path(self.working_dir).resolve()

    def _inside(self, token: str) -> bool:
        if token.startswith("~"):
            return False
        p = Path(token)
        full = (p if p.is_absolute() else self.root / p).resolve()
        return full == self.root or self.root in full.parents

    def check(self, language: str, command: str) -> None:
        """Raise :class:`PolicyViolation` if the command may not run."""
        if language == "bash":
            try:
                tokens = shlex.split(command, comments=True)
            except ValueError as exc:
                raise PolicyViolation(f"cannot parse command: {exc}") from None
            for tok in tokens:
                for part in re.split(r"[=:,;|&<>()`$]", tok):
                    if not part:
                        continue
                    if not self.network_allowed and os.path.basename(part) in _NETWORK_COMMANDS:
                        raise PolicyViolation(f"network access is disabled ({part})")
                    if ("/" in part or part.startswith(("~", ".."))) and not self._inside(part):
                        raise PolicyViolation(f"path outside the working directory: {part}")
        elif language == "python":
            if not self.network_allowed and _NETWORK_PY_RE.search(command):
                raise PolicyViolation("network access is disabled")
            for m in _PY_PATH_RE.finditer(command):
                if not self._inside(m.group(2)):
                    raise PolicyViolation(f"path outside the working directory: {m.group(2)}")
            if re.search(r"\bos\.chdir\b|\bsubprocess\b|\bos\.system\b", command):
                raise PolicyViolation("process spawning and chdir are not allowed in python snippets")
        else:
            raise PolicyViolation(f"unsupported language {language!r}")


@dataclass(frozen=True)
class CodeStep:
    language: str
    command: str
    stdout: str
    stderr: str
    exit_code: int
    refused: bool = False
    timed_out: bool = False


@dataclass
class CodeSession:
    goal: str
    budget: int = CODER_BUDGET
    transcript: list[CodeStep] = field(default_factory=list)
    summary: str = ""
    status: str = "running"  # completed | failed | incomplete

    def to_dict(self) -> dict:
        return {
            "goal": self.goal,
            "budget": self.budget,
            "status": self.status,
            "summary": self.summary,
            "transcript": [s.__dict__ for s in self.transcript],
        }


def _clip(text: str) -> str:
    return text if len(text) <= OUTPUT_LIMIT else text[:OUTPUT_LIMIT] + "\n...[truncated]"


def execute_in_sandbox(policy: SandboxPolicy, language: str, command: str) -> CodeStep:
    try:
        policy.check(language, command)
    except PolicyViolation as exc:
        return CodeStep(language, command, "", f"REFUSED by sandbox policy: {exc}", 126, refused=True)
    root = policy.root
    root.mkdir(parents=True, exist_ok=True)
    argv = ["bash", "--noprofile", "--norc", "-c", command] if language == "bash" else [sys.executable, "-I", "-c", command]
    env = {"PATH": os.environ.get("PATH", "/usr/bin:/bin"), "HOME": str(root), "LANG": "C.UTF-8"}
    try:
        proc = subprocess.run(argv, cwd=root, env=env, capture_output=True, text=True,
                              timeout=policy.timeout_s, errors="replace")
    except subprocess.TimeoutExpired as exc:
        out = exc.stdout.decode(errors="replace") if isinstance(exc.stdout, bytes) else (exc.stdout or "")
        return CodeStep(language, command, _clip(out), f"killed after {policy.timeout_s:g}s timeout", 124,
                        timed_out=True)
    # keep logs free of machine-specific absolute paths
    scrub = str(root)
    return CodeStep(language, command, _clip(proc.stdout.replace(scrub, ".")),
                    _clip(proc.stderr.replace(scrub, ".")), proc.returncode)


_CODE_BLOCK_RE = re.compile(r"```(bash|sh|shell|python|py)?[ \t]*\n(.*?)```", re.S | re.I)
_REPORT_RE = re.compile(r"^[ \t]*(DONE|FAIL)[ \t]*:[ \t]*(.*)", re.S | re.M)


def parse_coder_reply(text: str) -> tuple[str, str]:
    """``("done"|"fail", summary)`` or ``("bash"|"python", code)`` or ``("invalid", why)``."""
    m = _CODE_BLOCK_RE.search(text)
    if m:
        lang = (m.group(1) or "bash").lower()
        lang = "python" if lang in ("python", "py") else "bash"
        return lang, m.group(2).strip()
    r = _REPORT_RE.search(text)
    if r:
        return r.group(1).lower(), r.group(2).strip() or r.group(1)
    return "invalid", "reply had neither a code block nor a DONE:/FAIL: line"


def _render_transcript(steps: list[CodeStep]) -> str:
    if not steps:
        return "(nothing executed yet)"
    out = []
    for i, s in enumerate(steps, 1):
        out.append(f"## step {i} ({s.language}) exit={s.exit_code}\n$ {s.command}\n{s.stdout}{s.stderr}".rstrip())
    return "\n\n".join(out)


def run_code_session(goal: str, policy: SandboxPolicy, gateway, template: PromptTemplate,
                     budget: int = CODER_BUDGET, task_id: str = "") -> CodeSession:
    """Inner propose-execute-observe loop of the code agent.

    Stops when the model reports ``DONE:`` / ``FAIL:`` or after ``budget``
    executed commands. The GUI environment is never touched directly; files
    written to the working directory are picked up by the caller.
    """
    session = CodeSession(goal, budget)
    while len(session.transcript) < budget:
        prompt = render_prompt(template, {
            "BUDGET": str(budget), "GOAL": goal, "TRANSCRIPT": _render_transcript(session.transcript),
        })
        reply = gateway.complete(gateway.request("coder", prompt, [], task_id))
        kind, body = parse_coder_reply(reply)
        if kind in ("done", "fail"):
            session.status = "completed" if kind == "done" else "failed"
            session.summary = f"{body} (code agent {session.status} after {len(session.transcript)} step(s))"
            return session
        if kind == "invalid":
            session.transcript.append(CodeStep("bash", "", "", body, 2))
            continue
        session.transcript.append(execute_in_sandbox(policy, kind, body))
    session.status = "incomplete"
    last = session.transcript[-1] if session.transcript else None
    tail = f" Last exit code: {last.exit_code}." if last else ""
    session.summary = (f"INCOMPLETE: the code agent used its full budget of {budget} steps "
                       f"without reporting completion.{tail}")
    return session


# -- target resolution ---------------------------------------------------------


@dataclass(frozen=True)
class ResolvedAction:
    events: tuple[InputEvent, ...]
    elements: tuple[UIElement, ...] = ()  # grounded targets, in event order

    @property
    def element(self) -> Optional[UIElement]:
        return self.elements[0] if self.elements else None


def element_at(obs: Observation, point: tuple[int, int]) -> Optional[UIElement]:
    for el in obs.elements:
        if el.contains(*point):
            return el
    return None


def _ground(description: str, obs: Observation, gateway, task_id: str) -> tuple[tuple[int, int], Optional[UIElement]]:
    point = gateway.ground(description, obs, task_id=task_id)
    return point, element_at(obs, point)


def _phrase_anchor(phrase: str, obs: Observation, end: bool) -> tuple[tuple[int, int], UIElement]:
    from .sim import char_anchor

    want = phrase.lower()
    for el in obs.elements:
        text = el.content or el.label
        idx = text.lower().find(want)
        if idx >= 0:
            pos = idx + len(phrase) if end else idx
            x = char_anchor(el.bbox, text, pos)
            return (x, el.center[1]), el
    raise GroundingError(f"no text element contains {phrase!r}")


def resolve_target(action: Action, obs: Observation, gateway, task_id: str = "") -> ResolvedAction:
    """Rewrite a described action into coordinate-level input events."""
    if isinstance(action, (Click, DoubleClick)):
        pt, el = _ground(action.target, obs, gateway, task_id)
        count = action.count if isinstance(action, Click) else 2
        button = action.button if isinstance(action, Click) else "left"
        mods = action.modifiers if isinstance(action, Click) else ()
        return ResolvedAction((InputEvent("click", pt, count=count, button=button, modifiers=mods),), (el,) if el else ())
    if isinstance(action, Type):
        if not action.target.strip():
            return ResolvedAction((InputEvent("type", None, text=action.text, overwrite=action.overwrite,
                                              submit=action.submit),))
        pt, el = _ground(action.target, obs, gateway, task_id)
        return ResolvedAction((InputEvent("type", pt, text=action.text, overwrite=action.overwrite,
                                          submit=action.submit),), (el,) if el else ())
    if isinstance(action, DragAndDrop):
        p1, e1 = _ground(action.source, obs, gateway, task_id)
        p2, e2 = _ground(action.destination, obs, gateway, task_id)
        return ResolvedAction((InputEvent("drag", p1, p2),), tuple(e for e in (e1, e2) if e))
    if isinstance(action, HighlightTextSpan):
        if gateway.profile.grounding == "sim":
            p1, e1 = _phrase_anchor(action.start_phrase, obs, end=False)
            p2, _ = _phrase_anchor(action.end_phrase, obs, end=True)
            return ResolvedAction((InputEvent("select", p1, p2),), (e1,))
        p1, e1 = _ground(action.start_phrase, obs, gateway, task_id)
        p2, _ = _ground(action.end_phrase, obs, gateway, task_id)
        return ResolvedAction((InputEvent("select", p1, p2),), (e1,) if e1 else ())
    if isinstance(action, Scroll):
        pt, el = _ground(action.target, obs, gateway, task_id)
        return ResolvedAction((InputEvent("scroll", pt, amount=action.amount, axis=action.axis),), (el,) if el else ())
    if isinstance(action, Open):
        return ResolvedAction((InputEvent("open", text=action.app_or_file),))
    if isinstance(action, SwitchApplications):
        return ResolvedAction((InputEvent("switch", text=action.app),))
    if isinstance(action, Hotkey):
        return ResolvedAction((InputEvent("hotkey", keys=action.keys),))
    if isinstance(action, HoldAndPress):
        return ResolvedAction((InputEvent("hotkey", keys=action.hold_keys + action.press_keys),))
    if isinstance(action, SetCellValues):
        return ResolvedAction((InputEvent("cells", cells=action.cells),))
    if isinstance(action, Wait):
        return ResolvedAction((InputEvent("wait", seconds=float(action.seconds)),))
    raise GroundingError(f"{action.name} has no input events")


__all__ = [
    "CodeSession",
    "CodeStep",
    "ResolvedAction",
    "SandboxPolicy",
    "execute_in_sandbox",
    "parse_coder_reply",
    "resolve_target",
    "run_code_session",
    "run_search",
]
