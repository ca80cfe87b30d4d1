import pytest

from deskloop.actions import Click
from deskloop.core import InputEvent
from deskloop.errors import WorldLoadError
from deskloop.loop_breaker import action_repeat_count
from deskloop.sim import SimDesktop, char_anchor, char_offset, load_world, parse_world, shipped_worlds_dir

from conftest import Step

MINIMAL = {
    "initial": "home",
    "screens": {
        "home": {"elements": [{"label": "Go", "kind": "button"}],
                 "transitions": [{"on": "click", "target": "Go", "effects": [{"goto": "done"}]}]},
        "done": {"elements": [{"label": "Finished", "kind": "text"}]},
    },
    "success": [{"screen": "done"}],
}


def shipped(name: str) -> SimDesktop:
    return SimDesktop(load_world(shipped_worlds_dir() / f"{name}.yaml"))


def click(env: SimDesktop, label: str) -> str:
    el = next(e for e in env.observe(0).elements if e.label == label)
    return env.execute(InputEvent("click", el.center))


def hotkey(env: SimDesktop, *keys: str) -> str:
    return env.execute(InputEvent("hotkey", keys=keys))


class TestLoad:
    def test_minimal_world(self):
        env = SimDesktop(parse_world(MINIMAL))
        assert not env.evaluate_success()
        click(env, "Go")
        assert env.evaluate_success()

    def test_missing_goto_target_names_path(self):
        doc = {**MINIMAL, "screens": {**MINIMAL["screens"], "home": {
            "elements": [{"label": "Go"}],
            "transitions": [{"on": "click", "target": "Go", "effects": [{"goto": "nowhere"}]}]}}}
        with pytest.raises(WorldLoadError) as exc:
            parse_world(doc)
        assert exc.value.path == "/screens/home/transitions/0/effects/0/goto"
        assert "nowhere" in str(exc.value)

    def test_schema_error_names_path(self):
        doc = {**MINIMAL, "screens": {"home": {"elements": [{"label": "Go", "kind": "slider"}]}}}
        with pytest.raises(WorldLoadError) as exc:
            parse_world(doc)
        assert exc.value.path.startswith("/screens/home/elements/0")

    def test_unknown_initial(self):
        with pytest.raises(WorldLoadError, match="initial"):
            parse_world({**MINIMAL, "initial": "attic"})

    def test_bad_yaml_and_missing_file(self, tmp_path):
        bad = tmp_path / "w.yaml"
        bad.write_text("screens: [unclosed")
        with pytest.raises(WorldLoadError):
            load_world(bad)
        with pytest.raises(WorldLoadError):
            load_world(tmp_path / "absent.yaml")

    def test_on_key_is_not_a_boolean(self, tmp_path):
        p = tmp_path / "w.yaml"
        p.write_text("initial: a\nscreens:\n  a:\n    elements: [{label: X}]\n"
                     "    transitions: [{on: click, target: X, effects: [{flag: {hit: true}}]}]\n"
                     "success: [{flag: hit}]\n")
        env = SimDesktop(load_world(p))
        click(env, "X")
        assert env.evaluate_success()

    @pytest.mark.parametrize("path", sorted(shipped_worlds_dir().glob("*.yaml")), ids=lambda p: p.stem)
    def test_shipped_worlds_validate(self, path):
        world = load_world(path)
        assert not SimDesktop(world).evaluate_success()  # no task starts solved


class TestObservation:
    def test_digest_deterministic(self):
        a, b = shipped("dark-mode"), shipped("dark-mode")
        assert a.observe(0).screen_digest == b.observe(5).screen_digest

    def test_toggle_changes_digest(self):
        env = shipped("dark-mode")
        click(env, "Settings")
        click(env, "Appearance")
        before = env.observe(0)
        click(env, "Dark mode")
        after = env.observe(1)
        assert before.screen_digest != after.screen_digest
        assert next(e for e in after.elements if e.label == "Dark mode").state == "on"

    def test_hidden_state_does_not_affect_digest(self):
        env = shipped("impress-masters")
        d0 = env.observe(0).screen_digest
        env.flags["saved"] = True  # flags are invisible
        assert env.observe(0).screen_digest == d0

    def test_files_visible_only_where_shown(self):
        env = shipped("export-pdf")
        d0 = env.observe(0).screen_digest
        env.files["notes.txt"] = {"attrs": {}, "content": ""}
        assert env.observe(0).screen_digest != d0
        assert "notes.txt" in env.observe(0).files
        click(env, "Export as PDF")
        d1 = env.observe(0).screen_digest
        env.files["more.txt"] = {"attrs": {}, "content": ""}
        assert env.observe(0).screen_digest == d1 and env.observe(0).files == ()

    def test_description_lists_elements(self):
        text = shipped("dark-mode").observe(0).description
        assert 'button "Settings"' in text and text.startswith("Window: Desktop")


class TestEvents:
    def test_export_writes_file(self):
        env = shipped("export-pdf")
        click(env, "Export as PDF")
        click(env, "Export")
        assert env.evaluate_success() and "thesis.pdf" in env.observe(0).files

    def test_trap_click_is_absorbed(self):
        env = shipped("trap-apply")
        o0 = env.observe(0)
        assert click(env, "Apply") == "absorbed"
        o1 = env.observe(1)
        click(env, "Apply")
        o2 = env.observe(2)
        assert o0.screen_digest == o1.screen_digest == o2.screen_digest
        steps = [Step(Click("Apply"), o0, o1), Step(Click("Apply"), o1, o2)]
        assert action_repeat_count(steps, 1) == 2

    def test_trap_keyboard_route(self):
        env = shipped("trap-apply")
        hotkey(env, "alt", "a")
        assert env.evaluate_success()

    def test_missed_click_is_noop(self):
        env = shipped("dark-mode")
        d0 = env.observe(0).screen_digest
        assert env.execute(InputEvent("click", (1900, 1070))) == "missed-click"
        assert env.observe(0).screen_digest == d0

    def test_wait_stabilizes(self):
        env = SimDesktop(parse_world({"initial": "a", "screens": {"a": {"stable": False, "elements": []}},
                                      "success": [{"screen": "a"}]}))
        assert not env.observe(0).stable
        env.wait(1)
        assert env.observe(0).stable

    def test_unknown_event(self):
        with pytest.raises(ValueError):
            shipped("dark-mode").execute(InputEvent("telepathy"))

    def test_type_into_field(self):
        env = shipped("dark-mode")
        click(env, "Settings")
        f = next(e for e in env.observe(0).elements if e.label == "Device name")
        env.execute(InputEvent("type", f.center, text="lab-1", overwrite=True))
        assert next(e for e in env.observe(0).elements if e.label == "Device name").content == "lab-1"

    def test_select_text_span(self):
        text = "The quick brown fox"
        bbox = (100, 0, 500, 40)
        start, end = text.index("quick"), text.index("fox") + 3
        assert char_offset(bbox, text, char_anchor(bbox, text, start)) == start
        assert char_offset(bbox, text, char_anchor(bbox, text, end)) == end

    def test_sync_files(self, tmp_path):
        env = shipped("export-pdf")
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "r.txt").write_text("hi")
        assert env.sync_files(tmp_path) == ["sub/r.txt"]
        assert env.sync_files(tmp_path) == []


class TestImpressMasters:
    def open_masters(self, env):
        click(env, "View")
        click(env, "Master Slide")

    def test_fresh_world_fails(self):
        env = shipped("impress-masters")
        assert len(env.unmet_conditions()) == 3

    def test_one_master_is_not_enough(self):
        env = shipped("impress-masters")
        self.open_masters(env)
        click(env, "Master Corporate")
        click(env, "Slide number color")
        hotkey(env, "ctrl", "s")
        assert env.unmet_conditions() == ["the slide number is still grey on the Plain master"]

    def test_both_masters_and_save(self):
        env = shipped("impress-masters")
        self.open_masters(env)
        click(env, "Master Corporate")
        click(env, "Slide number color")
        click(env, "Master Plain")
        click(env, "Slide number color")
        assert env.unmet_conditions() == ["the presentation is not saved"]
        hotkey(env, "ctrl", "s")
        assert env.evaluate_success()
        assert any(e.label == "Saved" for e in env.observe(0).elements)

    def test_reset(self):
        env = shipped("impress-masters")
        hotkey(env, "ctrl", "s")
        env.reset()
        assert env.flags["saved"] is False
