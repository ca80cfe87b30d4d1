"""Trajectory statistics: false completions, loops and wasted steps.

Every metric is an exact ratio (numerator, denominator); a zero denominator
is reported as undefined instead of 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .core import Trajectory, read_trajectory
from .errors import EmptyInputError
from .loop_breaker import LoopConfig, StepLike, evaluate, triggering_steps

METRIC_ORDER = ("success_rate", "fdf", "fda", "done_accuracy", "lf", "la", "wsr")
METRIC_TITLES = {
    "success_rate": "Success rate",
    "fdf": "False Done / Failed",
    "fda": "False Done / All",
    "done_accuracy": "DONE accuracy",
    "lf": "Loop / Failed",
    "la": "Loop / All",
    "wsr": "Wasted Steps Ratio",
}


@dataclass(frozen=True)
class Ratio:
    num: int
    den: int
    undefined_label: str = "n/a"

    @property
    def value(self) -> Optional[Fraction]:
        return Fraction(self.num, self.den) if self.den else None

    def percent_text(self) -> str:
        if not self.den:
            return self.undefined_label
        # tenths of a percent, rounded half up, in exact integer arithmetic
        tenths = (2000 * self.num + self.den) // (2 * self.den)
        return f"{tenths // 10}.{tenths % 10}%"

    def to_dict(self) -> dict:
        return {"value": self.percent_text(), "numerator": self.num, "denominator": self.den}


@dataclass(frozen=True)
class RunOutcomeRow:
    task_id: str
    terminal_kind: str
    claimed_done: bool
    ground_success: bool
    loop_segments: tuple[tuple[int, int], ...] = ()  # inclusive step ranges
    total_steps: int = 0
    tag: str = ""

    def __post_init__(self) -> None:
        prev_end = -1
        for start, end in self.loop_segments:
            if not (0 <= start <= end < self.total_steps):
                raise ValueError(f"segment [{start}, {end}] outside [0, {self.total_steps})")
            if start <= prev_end:
                raise ValueError("loop segments overlap or are unsorted")
            prev_end = end

    @property
    def failed(self) -> bool:
        return not self.ground_success

    @property
    def has_loop(self) -> bool:
        return bool(self.loop_segments)

    @property
    def loop_steps(self) -> int:
        return sum(end - start + 1 for start, end in self.loop_segments)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "terminal_kind": self.terminal_kind,
            "claimed_done": self.claimed_done,
            "ground_success": self.ground_success,
            "loop_segments": [list(s) for s in self.loop_segments],
            "total_steps": self.total_steps,
            "tag": self.tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunOutcomeRow":
        return cls(d["task_id"], d["terminal_kind"], bool(d["claimed_done"]), bool(d["ground_success"]),
                   tuple(tuple(s) for s in d.get("loop_segments", ())), int(d["total_steps"]), d.get("tag", ""))


@dataclass(frozen=True)
class MetricsReport:
    n: int
    failed: int
    false_done: int
    success_rate: Ratio
    fdf: Ratio
    fda: Ratio
    done_accuracy: Ratio
    lf: Ratio
    la: Ratio
    wsr: Ratio
    wsr_run_mean: Optional[Fraction] = None
    extra: dict = field(default_factory=dict)

    def metric(self, name: str) -> Ratio:
        return getattr(self, name)

    def to_dict(self) -> dict:
        out: dict = {"tasks": self.n, "failed": self.failed, "false_done": self.false_done}
        for name in METRIC_ORDER:
            out[name] = self.metric(name).to_dict()
        mean = self.wsr_run_mean
        out["wsr_run_mean"] = "n/a (0 steps)" if mean is None else f"{float(mean) * 100:.1f}%"
        return out


# -- loop segments ----------------------------------------------------------------


def _merge(marked: Iterable[int]) -> list[tuple[int, int]]:
    segs: list[tuple[int, int]] = []
    for t in sorted(set(marked)):
        if segs and t == segs[-1][1] + 1:
            segs[-1] = (segs[-1][0], t)
        else:
            segs.append((t, t))
    return segs


def detect_loop_segments(steps: Sequence[StepLike], cfg: LoopConfig = LoopConfig()) -> list[tuple[int, int]]:
    """Maximal runs of steps inside detected loops.

    The counters are re-evaluated at every step with the given thresholds.
    When they fire, the steps that were counted (repeated no-change actions,
    or recurring screens) are marked. Steps whose recorded loop note shows a
    trigger the counters alone do not explain (a reflection SWITCH) are
    marked as well.
    """
    marked: set[int] = set()
    for t in range(len(steps)):
        d = evaluate(steps, t, None, cfg)
        if d.triggered:
            marked |= triggering_steps(steps, t, d, cfg)
        note = getattr(steps[t], "loop_note", None)
        if note is not None and note.triggered and not d.triggered:
            marked.add(t)
    return _merge(marked)


def row_from_trajectory(traj: Trajectory, cfg: Optional[LoopConfig] = None) -> RunOutcomeRow:
    if traj.trailer is None:
        raise ValueError("trajectory has no termination record")
    if cfg is None:
        loop = (traj.header.get("config") or {}).get("loop")
        cfg = LoopConfig(**loop) if loop else LoopConfig()
    kind = traj.trailer["kind"]
    return RunOutcomeRow(
        task_id=traj.header["task"]["id"],
        terminal_kind=kind,
        claimed_done=kind == "done-accepted",
        ground_success=bool(traj.trailer.get("env_success")),
        loop_segments=tuple(detect_loop_segments(traj.steps, cfg)),
        total_steps=len(traj.steps),
        tag=traj.header["task"].get("tag", ""),
    )


def load_rows(path, cfg: Optional[LoopConfig] = None) -> list[RunOutcomeRow]:
    """Rows from a trajectory file, a suite directory, or a ``rows.json`` fixture."""
    p = Path(path)
    if p.is_file():
        if p.suffix == ".json":
            return [RunOutcomeRow.from_dict(d) for d in json.loads(p.read_text(encoding="utf-8"))["rows"]]
        return [row_from_trajectory(read_trajectory(p), cfg)]
    rows: list[RunOutcomeRow] = []
    for f in sorted(p.rglob("rows.json")):
        rows.extend(load_rows(f))
    for f in sorted(p.rglob("trajectory.jsonl")):
        rows.append(row_from_trajectory(read_trajectory(f), cfg))
    return rows


# -- aggregation -------------------------------------------------------------------


def compute(rows: Sequence[RunOutcomeRow]) -> MetricsReport:
    if not rows:
        raise EmptyInputError("no runs to summarize")
    n = len(rows)
    failed = [r for r in rows if r.failed]
    claimed = [r for r in rows if r.claimed_done]
    false_done = sum(1 for r in failed if r.claimed_done)
    loops = [r for r in rows if r.has_loop]
    total_steps = sum(r.total_steps for r in rows)
    per_run = [Fraction(r.loop_steps, r.total_steps) for r in rows if r.total_steps]
    return MetricsReport(
        n=n,
        failed=len(failed),
        false_done=false_done,
        success_rate=Ratio(n - len(failed), n),
        fdf=Ratio(false_done, len(failed), "n/a (0 failed)"),
        fda=Ratio(false_done, n),
        done_accuracy=Ratio(sum(1 for r in claimed if r.ground_success), len(claimed), "n/a (0 claimed)"),
        lf=Ratio(sum(1 for r in failed if r.has_loop), len(failed), "n/a (0 failed)"),
        la=Ratio(len(loops), n),
        wsr=Ratio(sum(r.loop_steps for r in rows), total_steps, "n/a (0 steps)"),
        wsr_run_mean=sum(per_run, Fraction(0)) / len(per_run) if per_run else None,
    )


def emit_report(report: MetricsReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n"
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    rows = [(METRIC_TITLES[m], report.metric(m).percent_text(), f"{report.metric(m).num}/{report.metric(m).den}")
            for m in METRIC_ORDER]
    mean = report.wsr_run_mean
    rows.append(("WSR (per-run mean)", "n/a (0 steps)" if mean is None else f"{float(mean) * 100:.1f}%", ""))
    head = ("metric", "value", "n/d")
    widths = [max(len(r[i]) for r in rows + [head]) for i in range(3)]
    lines = [f"{head[0]:<{widths[0]}}  {head[1]:>{widths[1]}}  {head[2]:>{widths[2]}}",
             "  ".join("-" * w for w in widths)]
    for a, b, c in rows:
        lines.append(f"{a:<{widths[0]}}  {b:>{widths[1]}}  {c:>{widths[2]}}")
    lines.append(f"tasks={report.n} failed={report.failed} false_done={report.false_done}")
    return "\n".join(lines) + "\n"
