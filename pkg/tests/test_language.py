import pytest

from deskloop.actions import (
    CallSearchAgent,
    Click,
    Done,
    DragAndDrop,
    Fail,
    Hotkey,
    SetCellValues,
    Type,
    Wait,
)
from deskloop.core import Injection, SuccessCriterion
from deskloop.errors import (
    ActionArgumentError,
    MalformedOutputError,
    ParseError,
    RenderError,
    UnknownActionError,
)
from deskloop.language import (
    MAX_CRITERIA,
    PromptTemplate,
    extract_json_object,
    format_judge,
    format_manager_output,
    format_reflection,
    parse_criteria,
    parse_grounded_action,
    parse_judge,
    parse_manager_output,
    parse_reflection,
    render_prompt,
    serialize_action,
)

MANAGER_TEXT = """(Completion Gate)
Success criteria:
1. The slide number is red on every master -- MET: both masters show a red number
2. The title bar shows deck.odp without an unsaved marker [EXACT CHECK] -- MET: title reads deck.odp
Feasibility: feasible
Decision: DONE

(Previous action verification)
Pressing Ctrl+S removed the unsaved marker.

(Screenshot Analysis)
Normal view, both masters edited, document saved.

(Next Action)
Declare the task complete.

(Grounded Action)
```python
agent.done()
```
"""


class TestGroundedAction:
    def test_click_with_all_arguments(self):
        a = parse_grounded_action('agent.click("The menu button at the top right", 1, "left")')
        assert a == Click("The menu button at the top right", 1, "left")

    def test_done(self):
        assert parse_grounded_action("agent.done()") == Done()

    def test_embedded_quote(self):
        a = parse_grounded_action('agent.type("search box", "he said \\"hi\\"")')
        assert a == Type("search box", 'he said "hi"')

    def test_inside_fence_with_prose(self):
        text = "I will now click.\n```python\nagent.click(\"OK\")\n```\nthanks"
        assert parse_grounded_action(text) == Click("OK")

    def test_call_text_inside_string_is_not_a_second_call(self):
        assert parse_grounded_action('agent.type("", "agent.done()")') == Type("", "agent.done()")

    def test_two_calls_malformed(self):
        with pytest.raises(MalformedOutputError):
            parse_grounded_action('agent.click("A")\nagent.click("B")')

    def test_two_fences_malformed(self):
        with pytest.raises(MalformedOutputError):
            parse_grounded_action("```\nagent.done()\n```\n```\nagent.fail()\n```")

    def test_no_call_malformed(self):
        with pytest.raises(MalformedOutputError):
            parse_grounded_action("click the OK button")

    def test_unknown_action(self):
        with pytest.raises(UnknownActionError):
            parse_grounded_action("agent.teleport(1, 2)")

    @pytest.mark.parametrize("text", ["agent.click()", 'agent.done("x")', 'agent.click("a", 1, "left", [], 5)'])
    def test_arity(self, text):
        with pytest.raises(ActionArgumentError):
            parse_grounded_action(text)

    def test_keywords_rejected(self):
        with pytest.raises(ActionArgumentError):
            parse_grounded_action('agent.click(target="OK")')

    def test_non_literal_rejected(self):
        with pytest.raises(ActionArgumentError):
            parse_grounded_action("agent.click(os.getcwd())")

    def test_hotkey_forms(self):
        assert parse_grounded_action('agent.hotkey("Ctrl", "S")') == Hotkey(("ctrl", "s"))
        assert parse_grounded_action('agent.hotkey(["ctrl", "s"])') == Hotkey(("ctrl", "s"))

    def test_cells(self):
        a = parse_grounded_action('agent.set_cell_values({"B2": 1200, "B3": "800"})')
        assert a == SetCellValues((("B2", 1200), ("B3", "800")))

    def test_errors_are_parse_errors(self):
        assert issubclass(ActionArgumentError, ParseError) and issubclass(UnknownActionError, ParseError)


class TestSerialize:
    def test_done(self):
        assert serialize_action(Done()) == "agent.done()"

    def test_click_shows_count_and_button(self):
        assert serialize_action(Click("OK", 2, "left")) == 'agent.click("OK", 2, "left")'
        assert serialize_action(Click("OK")) == 'agent.click("OK", 1, "left")'

    def test_hotkey(self):
        assert serialize_action(Hotkey(("Ctrl", "S"))) == 'agent.hotkey("ctrl", "s")'

    def test_trailing_defaults_dropped(self):
        assert serialize_action(Type("box", "hi")) == 'agent.type("box", "hi")'
        assert serialize_action(Type("box", "hi", False, True)) == 'agent.type("box", "hi", False, True)'

    @pytest.mark.parametrize("a", [
        Click("x\ny", 3, "right", ("shift",)), Type("", "tab\there \\ back"), DragAndDrop("a", "b"),
        Wait(0.5), Fail(), CallSearchAgent("How to x?"), SetCellValues((("A1", 1.5), ("A2", "é"))),
        Type("f", "\ud800 lone surrogate"),
    ])
    def test_round_trip_examples(self, a):
        assert parse_grounded_action(serialize_action(a)) == a


class TestManagerOutput:
    def test_well_formed(self):
        mo = parse_manager_output(MANAGER_TEXT)
        assert mo.gate_decision == "DONE"
        assert mo.grounded_action == Done()
        assert mo.prev_verification.startswith("Pressing Ctrl+S")
        assert mo.screenshot_analysis and mo.next_action
        assert [c.status for c in mo.criteria] == ["met-with-evidence"] * 2
        assert [c.exact_check for c in mo.criteria] == [False, True]
        assert mo.criteria[1].statement == "The title bar shows deck.odp without an unsaved marker"
        assert not mo.gate_ambiguous

    def test_missing_section(self):
        text = MANAGER_TEXT.replace("(Next Action)", "(Plan)")
        with pytest.raises(MalformedOutputError, match="next action"):
            parse_manager_output(text)

    def test_missing_grounded_action(self):
        with pytest.raises(MalformedOutputError):
            parse_manager_output(MANAGER_TEXT.split("(Grounded Action)")[0])

    def test_conflicting_tokens_are_continue(self):
        text = MANAGER_TEXT.replace("Decision: DONE", "Decision: DONE or FAIL")
        mo = parse_manager_output(text)
        assert mo.gate_decision == "CONTINUE" and mo.gate_ambiguous

    def test_decision_line_with_choices_listed(self):
        text = MANAGER_TEXT.replace("Decision: DONE", "Decision (DONE / FAIL / CONTINUE): CONTINUE")
        assert parse_manager_output(text).gate_decision == "CONTINUE"

    def test_no_decision(self):
        text = MANAGER_TEXT.replace("Decision: DONE", "")
        with pytest.raises(MalformedOutputError):
            parse_manager_output(text)

    def test_claimed_met_without_evidence_stays_unmet(self):
        crits, _ = parse_criteria("1. The file is saved -- MET\n")
        assert crits[0].status == "unmet"

    def test_truncation_to_three(self):
        gate = "\n".join(f"{i}. criterion number {i} -- UNMET" for i in range(1, 6))
        crits, dropped = parse_criteria(gate)
        assert len(crits) == MAX_CRITERIA == 3 and dropped == 2
        assert [c.index for c in crits] == [1, 2, 3]

    def test_exact_check_svg(self):
        crits, _ = parse_criteria("1. A file named chart.svg exists in Exports [EXACT CHECK] -- UNMET")
        assert crits[0].exact_check and ".svg" in crits[0].statement

    def test_impossibility(self):
        text = MANAGER_TEXT.replace("Feasibility: feasible", "Feasibility: impossible - the app has no such menu")
        assert parse_manager_output(text).declares_impossible

    def test_format_round_trip(self):
        crits = [SuccessCriterion(1, "Saved", True, "met-with-evidence", "toast")]
        mo = parse_manager_output(format_manager_output(Click("OK"), "CONTINUE", crits))
        assert mo.grounded_action == Click("OK")
        assert mo.criteria == tuple(crits)


class TestReflection:
    def test_switch(self):
        sig = parse_reflection(format_reflection("SWITCH", loop=True, reason="alternating tabs"))
        assert sig.loop and sig.strategy == "SWITCH" and sig.strategy_reason == "alternating tabs"
        assert sig.verdict == "Case 1"

    def test_all_continue(self):
        sig = parse_reflection(format_reflection())
        assert (sig.loop, sig.termination, sig.strategy, sig.verdict) == (False, "CONTINUE", "KEEP", "Case 2")

    def test_case_insensitive_labels(self):
        text = format_reflection().replace("Loop signal", "LOOP SIGNAL").replace("Verdict", "**verdict**")
        assert parse_reflection(text).verdict == "Case 2"

    @pytest.mark.parametrize("text", ["", "   "])
    def test_empty(self, text):
        with pytest.raises(MalformedOutputError):
            parse_reflection(text)

    def test_missing_line(self):
        text = "\n".join(line for line in format_reflection().splitlines() if not line.startswith("Strategy"))
        with pytest.raises(MalformedOutputError, match="strategy"):
            parse_reflection(text)

    def test_bad_enum(self):
        with pytest.raises(MalformedOutputError):
            parse_reflection(format_reflection().replace("Strategy signal: KEEP", "Strategy signal: maybe"))


class TestJudge:
    def test_accept(self):
        v = parse_judge('{"complete": true, "reason": "all criteria visible", "missing_steps": ""}')
        assert v.complete and not v.overridden

    def test_missing_steps_override(self):
        v = parse_judge('{"complete": true, "reason": "looks done", "missing_steps": "save file"}')
        assert not v.complete and v.overridden

    def test_uncertainty_override(self):
        v = parse_judge('{"complete": true, "reason": "not sure the file saved", "missing_steps": ""}')
        assert not v.complete and v.overridden

    def test_reject_never_flipped(self):
        v = parse_judge('{"complete": false, "reason": "certainly finished", "missing_steps": ""}')
        assert not v.complete and not v.overridden

    def test_prose_and_fences_tolerated(self):
        v = parse_judge('Here you go:\n```json\n{"complete": false, "reason": "unsaved"}\n```')
        assert not v.complete and v.reason == "unsaved"

    def test_list_missing_steps_joined(self):
        v = parse_judge('{"complete": false, "reason": "r", "missing_steps": ["save", "", "close"]}')
        assert v.missing_steps == "save; close"

    def test_no_json(self):
        with pytest.raises(MalformedOutputError):
            parse_judge("The task is complete.")

    def test_non_boolean_complete(self):
        with pytest.raises(MalformedOutputError):
            parse_judge('{"complete": "yes"}')

    def test_custom_phrases(self):
        v = parse_judge(format_judge(True, "probably fine"), ("probably",))
        assert not v.complete

    def test_extract_skips_non_objects(self):
        assert extract_json_object('[1] {bad} {"a": 1}') == {"a": 1}


class TestRender:
    def test_substitution(self):
        tpl = PromptTemplate.load("manager")
        bindings = {p: "" for p in tpl.required_placeholders}
        bindings["TASK_DESCRIPTION"] = "change slide number color to red"
        text = render_prompt(tpl, bindings)
        assert "change slide number color to red" in text
        assert "{TASK_DESCRIPTION}" not in text
        assert render_prompt(tpl, bindings) == text

    def test_unbound(self):
        tpl = PromptTemplate("verifier", "Task: {TASK_DESCRIPTION}\n{OBSERVATION}")
        with pytest.raises(RenderError, match="OBSERVATION"):
            render_prompt(tpl, {"TASK_DESCRIPTION": "x"})

    def test_injections_in_order(self):
        tpl = PromptTemplate("manager", "Task: {TASK_DESCRIPTION}\nKNOWLEDGE follows below.")
        inj = [Injection("knowledge", "tutorial one", 2), Injection("rejection-reason", "not saved", 3),
               Injection("knowledge", "tutorial two", 4)]
        text = render_prompt(tpl, {"TASK_DESCRIPTION": "t"}, inj, ["DIRECTIVE x"])
        positions = [text.index(s) for s in ("tutorial one", "not saved", "tutorial two", "DIRECTIVE x")]
        assert positions == sorted(positions)
        assert "[VERIFIER REJECTION @ step 3]" in text

    def test_unknown_role(self):
        with pytest.raises(ValueError):
            PromptTemplate("poet", "x")

    @pytest.mark.parametrize("role", ["manager", "reflection", "verifier", "search", "coder", "grounder"])
    def test_shipped_templates_load(self, role):
        assert PromptTemplate.load(role).required_placeholders


def test_round_trip_of_wait_float():
    assert parse_grounded_action(serialize_action(Wait(0.25))) == Wait(0.25)


def test_backticks_inside_string_do_not_close_the_fence():
    a = Type("editor", "```")
    assert parse_grounded_action(f"```python\n{serialize_action(a)}\n```") == a
    assert parse_grounded_action("```\nagent.click(\"OK\")\n```") == parse_grounded_action('agent.click("OK")')
