"""Shared fixtures: synthetic observations and steps, shipped-suite helpers."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import pytest

from deskloop.actions import Action
from deskloop.core import Observation, UIElement
from deskloop.orchestrator import RunConfig
from deskloop.suite import find_task, run_suite_task


def obs(digest: str, step: int = 0, elements=(), stable: bool = True, files=(), description: str = "") -> Observation:
    return Observation(step, digest, tuple(elements), f"frame-{step}", stable, description, tuple(files))


def el(label: str, row: int = 0, kind: str = "text", state=None, content=None) -> UIElement:
    return UIElement(label, (10, 10 + 40 * row, 400, 40 + 40 * row), kind, state, content)


@dataclass
class Step:
    """Minimal step shape the loop breaker reads."""

    parsed_action: Optional[Action]
    pre_obs: Observation
    post_obs: Observation
    loop_note: object = None


def chain(actions, digests) -> list[Step]:
    """Steps from ``len(actions)`` actions and ``len(actions) + 1`` screen digests."""
    assert len(digests) == len(actions) + 1
    return [Step(a, obs(digests[i], i), obs(digests[i + 1], i + 1)) for i, a in enumerate(actions)]


def run_shipped(task_id: str, tmp_path=None, **cfg_kwargs):
    task = find_task(task_id)
    return run_suite_task(task, RunConfig(**cfg_kwargs), tmp_path)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("deskloop").setLevel(logging.ERROR)
    yield


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
