import json
import random
from fractions import Fraction

import pytest

from deskloop.actions import Click, Hotkey, action_fingerprint
from deskloop.core import LoopDecision
from deskloop.errors import EmptyInputError
from deskloop.metrics import (
    Ratio,
    RunOutcomeRow,
    compute,
    detect_loop_segments,
    emit_report,
    load_rows,
)

import oracles
from conftest import Step, chain, obs
from corpus import trajectory


def rows(success_claimed=0, success_unclaimed=0, false_done=0, failed_unclaimed=0, steps=10, loops=()):
    """Synthetic outcome rows by category; ``loops`` applies to every row."""
    out = []
    spec = [(True, True, success_claimed), (True, False, success_unclaimed),
            (False, True, false_done), (False, False, failed_unclaimed)]
    for ok, claimed, count in spec:
        for _ in range(count):
            kind = "done-accepted" if claimed else ("budget-exhausted" if not ok else "fail-declared")
            out.append(RunOutcomeRow(f"t{len(out)}", kind, claimed, ok, tuple(loops), steps))
    return out


# Fixed outcome mixes with known false-completion and DONE-accuracy ratios.
WITH_VERIFIER = rows(success_claimed=252, success_unclaimed=10, false_done=91, failed_unclaimed=8)
WITHOUT_VERIFIER = rows(success_claimed=240, success_unclaimed=11, false_done=105, failed_unclaimed=5)
BASELINE = rows(success_claimed=250, success_unclaimed=10, false_done=86, failed_unclaimed=15)


class TestRatios:
    @pytest.mark.parametrize("fixture, fdf, acc", [
        (WITH_VERIFIER, "91.9%", "73.5%"),
        (WITHOUT_VERIFIER, "95.5%", "69.6%"),
        (BASELINE, "85.1%", "74.4%"),
    ])
    def test_table_rows(self, fixture, fdf, acc):
        r = compute(fixture)
        assert r.fdf.percent_text() == fdf == oracles.percent(r.fdf.num, r.fdf.den)
        assert r.done_accuracy.percent_text() == acc == oracles.percent(r.done_accuracy.num, r.done_accuracy.den)

    def test_fixture_shapes(self):
        r = compute(WITH_VERIFIER)
        assert (r.n, r.failed, r.false_done) == (361, 99, 91)
        assert (r.done_accuracy.num, r.done_accuracy.den) == (252, 343)

    def test_false_done_over_all(self):
        r = compute(rows(success_claimed=7, false_done=3))
        assert r.fda.percent_text() == "30.0%" and r.fdf.percent_text() == "100.0%"

    def test_wasted_steps_ratio(self):
        looped = [RunOutcomeRow("a", "done-accepted", True, True, ((10, 37),), 100)]
        plain = [RunOutcomeRow(f"b{i}", "done-accepted", True, True, (), 100) for i in range(9)]
        r = compute(looped + plain)
        assert (r.wsr.num, r.wsr.den) == (28, 1000) and r.wsr.percent_text() == "2.8%"
        assert r.wsr_run_mean == Fraction(28, 1000)
        assert r.la.percent_text() == "10.0%"

    def test_undefined_when_nothing_failed(self):
        r = compute(rows(success_claimed=4))
        assert r.fdf.percent_text() == "n/a (0 failed)" and r.lf.percent_text() == "n/a (0 failed)"
        assert r.fdf.value is None

    def test_undefined_when_nothing_claimed(self):
        assert compute(rows(failed_unclaimed=2)).done_accuracy.percent_text() == "n/a (0 claimed)"

    def test_undefined_when_no_steps(self):
        r = compute(rows(failed_unclaimed=2, steps=0))
        assert r.wsr.percent_text() == "n/a (0 steps)" and r.wsr_run_mean is None

    @pytest.mark.parametrize("num, den", [(1, 8), (1, 16), (5, 2000), (2, 3), (0, 7), (7, 7), (1, 2000)])
    def test_half_up_rounding(self, num, den):
        assert Ratio(num, den).percent_text() == oracles.percent(num, den)

    def test_loop_over_failed(self):
        data = rows(false_done=2, loops=[(0, 1)]) + rows(failed_unclaimed=2) + rows(success_claimed=4, loops=[(3, 3)])
        r = compute(data)
        assert (r.lf.num, r.lf.den) == (2, 4) and (r.la.num, r.la.den) == (6, 8)

    def test_empty_input(self):
        with pytest.raises(EmptyInputError):
            compute([])


class TestEmit:
    def test_json_deterministic(self):
        a = emit_report(compute(WITH_VERIFIER))
        b = emit_report(compute(list(reversed(WITH_VERIFIER))))
        assert a == b
        d = json.loads(a)
        assert d["fdf"] == {"value": "91.9%", "numerator": 91, "denominator": 99}

    def test_table(self):
        text = emit_report(compute(WITH_VERIFIER), "table")
        lines = text.splitlines()
        assert lines[0].split() == ["metric", "value", "n/d"]
        assert any(line.startswith("False Done / Failed") and "91.9%" in line and "91/99" in line for line in lines)
        assert lines[-1] == "tasks=361 failed=99 false_done=91"

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_report(compute(WITH_VERIFIER), "xml")


class TestRows:
    def test_round_trip(self):
        r = RunOutcomeRow("x", "done-accepted", True, False, ((1, 2), (5, 5)), 8, "trap")
        assert RunOutcomeRow.from_dict(json.loads(json.dumps(r.to_dict()))) == r
        assert r.loop_steps == 3

    @pytest.mark.parametrize("segs, total", [(((3, 2),), 10), (((0, 10),), 10), (((2, 4), (4, 6)), 10),
                                             (((5, 6), (1, 2)), 10), (((-1, 2),), 10)])
    def test_invalid_segments(self, segs, total):
        with pytest.raises(ValueError):
            RunOutcomeRow("x", "done-accepted", True, True, segs, total)

    def test_load_rows_fixture(self, tmp_path):
        p = tmp_path / "rows.json"
        p.write_text(json.dumps({"rows": [r.to_dict() for r in WITH_VERIFIER]}))
        assert load_rows(p) == WITH_VERIFIER
        assert load_rows(tmp_path) == WITH_VERIFIER


OK = Click("OK")


class TestSegments:
    def test_single_burst(self):
        # two no-change clicks, then a third step still on the same screen
        acts = [Click("a"), Click("b"), Click("c"), Click("d"), OK, OK, Click("e"), Click("f")]
        steps = chain(acts, list("ABCDEEEFG"))
        assert detect_loop_segments(steps) == [(4, 6)] == oracles.loop_segments(steps)

    def test_two_bursts(self):
        acts = [OK, OK, Click("x"), Click("y"), Hotkey(("ctrl", "s")), Hotkey(("ctrl", "s")), Click("z")]
        steps = chain(acts, list("AAAXBBBC"))
        assert detect_loop_segments(steps) == [(0, 2), (4, 6)] == oracles.loop_segments(steps)

    def test_loop_free(self):
        steps = chain([Click(c) for c in "abcde"], list("ABCDEF"))
        assert detect_loop_segments(steps) == [] == oracles.loop_segments(steps)

    def test_recorded_switch_marks_its_step(self):
        steps = chain([Click(c) for c in "abcd"], list("ABCDE"))
        steps[2].loop_note = LoopDecision("reflection-switch", 0, 1, action_fingerprint(Click("c")),
                                         "DIRECTIVE (loop breaker)")
        assert detect_loop_segments(steps) == [(2, 2)] == oracles.loop_segments(steps, switch_steps=[2])

    def test_oracle_agrees_on_random_trajectories(self):
        rng = random.Random(11)
        for _ in range(300):
            steps = trajectory(rng, 40)
            assert detect_loop_segments(steps) == oracles.loop_segments(steps)

    def test_none_actions_are_not_repeats(self):
        steps = [Step(None, obs("A", i), obs("A", i + 1)) for i in range(2)]
        assert detect_loop_segments(steps) == []
