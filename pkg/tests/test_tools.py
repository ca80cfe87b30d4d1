import pytest

from deskloop.actions import (
    Click,
    DragAndDrop,
    HighlightTextSpan,
    Hotkey,
    HoldAndPress,
    Open,
    Type,
    Wait,
)
from deskloop.backends import Gateway, ScriptedAdapter
from deskloop.core import BeliefState, TaskSpec
from deskloop.errors import GroundingError, PolicyViolation
from deskloop.language import PromptTemplate
from deskloop.tools import (
    SandboxPolicy,
    execute_in_sandbox,
    parse_coder_reply,
    resolve_target,
    run_code_session,
    run_search,
)

from conftest import el, obs


def gw(script: dict) -> Gateway:
    return Gateway({role: ScriptedAdapter(script) for role in script}, sleep=lambda s: None)


def belief() -> BeliefState:
    return BeliefState(TaskSpec("t", "Colour slide numbers"))


def bash(code: str) -> str:
    return f"```bash\n{code}\n```"


class TestSearch:
    def test_injects_knowledge(self):
        b = belief()
        text, note = run_search("How to recolour slide numbers?", b,
                                gw({"search": ["Use View > Master Slide; repeat for each master slide."]}))
        assert note is None and b.knowledge == [text]
        assert "repeat for each master slide" in text

    def test_two_searches_keep_order(self):
        b = belief()
        g = gw({"search": ["first", "second"]})
        run_search("q1", b, g)
        run_search("q2", b, g)
        assert b.knowledge == ["first", "second"]

    def test_backend_down_annotates(self):
        b = belief()
        text, note = run_search("q", b, gw({"search": []}))
        assert text is None and note["kind"] == "empty-knowledge"
        assert b.knowledge == []

    def test_template_rendering(self):
        g = gw({"search": ["ok"]})
        run_search("find the menu", belief(), g, PromptTemplate.load("search"), task_id="t")
        assert "find the menu" in g.transcript("t")[0]["request"]["system_text"]


class TestSandbox:
    def test_creates_files_in_working_dir(self, tmp_path):
        step = execute_in_sandbox(SandboxPolicy(str(tmp_path)), "bash", "echo hi > a.txt && cat a.txt")
        assert step.exit_code == 0 and step.stdout.strip() == "hi"
        assert (tmp_path / "a.txt").read_text() == "hi\n"

    @pytest.mark.parametrize("cmd", ["cat /etc/passwd", "ls ../", "cp x ~/y", "echo x > /tmp/out"])
    def test_path_escape_refused(self, tmp_path, cmd):
        step = execute_in_sandbox(SandboxPolicy(str(tmp_path)), "bash", cmd)
        assert step.refused and step.exit_code == 126 and "REFUSED" in step.stderr

    @pytest.mark.parametrize("cmd", ["curl http://example.com", "wget x", "/usr/bin/ssh host"])
    def test_network_refused(self, tmp_path, cmd):
        assert execute_in_sandbox(SandboxPolicy(str(tmp_path)), "bash", cmd).refused

    def test_network_allowed_flag(self, tmp_path):
        SandboxPolicy(str(tmp_path), network_allowed=True).check("bash", "curl --version")

    def test_python_policy(self, tmp_path):
        p = SandboxPolicy(str(tmp_path))
        for code in ["open('/etc/passwd').read()", "import socket", "import subprocess; subprocess.run('ls')"]:
            with pytest.raises(PolicyViolation):
                p.check("python", code)
        step = execute_in_sandbox(p, "python", "open('out.txt','w').write('x'); print(2+3)")
        assert step.stdout.strip() == "5" and (tmp_path / "out.txt").exists()

    def test_unsupported_language(self, tmp_path):
        with pytest.raises(PolicyViolation):
            SandboxPolicy(str(tmp_path)).check("ruby", "puts 1")

    def test_timeout(self, tmp_path):
        step = execute_in_sandbox(SandboxPolicy(str(tmp_path), timeout_s=0.3), "bash", "sleep 5")
        assert step.timed_out and step.exit_code == 124 and "timeout" in step.stderr

    def test_nonzero_exit_recorded(self, tmp_path):
        step = execute_in_sandbox(SandboxPolicy(str(tmp_path)), "bash", "ls missing-file")
        assert step.exit_code != 0 and step.stderr

    def test_working_dir_path_scrubbed(self, tmp_path):
        step = execute_in_sandbox(SandboxPolicy(str(tmp_path)), "bash", "pwd")
        assert str(tmp_path) not in step.stdout


class TestParseCoderReply:
    def test_code_blocks(self):
        assert parse_coder_reply(bash("ls")) == ("bash", "ls")
        assert parse_coder_reply("```python\nprint(1)\n```") == ("python", "print(1)")
        assert parse_coder_reply("```\nls\n```") == ("bash", "ls")

    def test_reports(self):
        assert parse_coder_reply("DONE: created 25 files") == ("done", "created 25 files")
        assert parse_coder_reply("FAIL: no permission")[0] == "fail"

    def test_invalid(self):
        assert parse_coder_reply("let me think")[0] == "invalid"


class TestCodeSession:
    TPL = PromptTemplate.load("coder")

    def test_creates_and_lists_files(self, tmp_path):
        g = gw({"coder": [bash("for i in $(seq 1 25); do touch a$i; done"), bash("ls"),
                          "DONE: created a1..a25"]})
        s = run_code_session("create files a1..a25", SandboxPolicy(str(tmp_path)), g, self.TPL, task_id="t")
        assert s.status == "completed" and "completed" in s.summary
        assert sorted(p.name for p in tmp_path.iterdir()) == sorted(f"a{i}" for i in range(1, 26))
        listed = s.transcript[1].stdout.split()
        assert set(listed) == {f"a{i}" for i in range(1, 26)}

    def test_transcript_shown_to_coder(self, tmp_path):
        g = gw({"coder": [bash("echo marker-42"), "DONE: ok"]})
        run_code_session("echo", SandboxPolicy(str(tmp_path)), g, self.TPL, task_id="t")
        assert "marker-42" in g.transcript("t")[1]["request"]["system_text"]

    def test_budget_exhausted(self, tmp_path):
        g = gw({"coder": {"default": bash("true")}})
        s = run_code_session("loop", SandboxPolicy(str(tmp_path)), g, self.TPL, budget=3)
        assert s.status == "incomplete" and s.summary.startswith("INCOMPLETE")
        assert len(s.transcript) == 3

    def test_refusal_is_observed_not_fatal(self, tmp_path):
        g = gw({"coder": [bash("cat /etc/passwd"), "FAIL: not allowed"]})
        s = run_code_session("read", SandboxPolicy(str(tmp_path)), g, self.TPL)
        assert s.transcript[0].refused and s.status == "failed"

    def test_invalid_reply_consumes_budget(self, tmp_path):
        g = gw({"coder": {"default": "hmm"}})
        s = run_code_session("x", SandboxPolicy(str(tmp_path)), g, self.TPL, budget=2)
        assert s.status == "incomplete" and len(s.transcript) == 2

    def test_to_dict(self, tmp_path):
        g = gw({"coder": ["DONE: nothing needed"]})
        d = run_code_session("x", SandboxPolicy(str(tmp_path)), g, self.TPL).to_dict()
        assert d["status"] == "completed" and d["transcript"] == []


class TestResolveTarget:
    O = obs("a", 0, [el("OK", 0, "button"), el("Name", 1, "field", content=""),
                     el("Body", 2, "text", content="The quick brown fox jumps")])

    def test_click_center(self):
        r = resolve_target(Click("OK", 2, "right"), self.O, gw({}))
        ev = r.events[0]
        assert (ev.kind, ev.point, ev.count, ev.button) == ("click", self.O.elements[0].center, 2, "right")
        assert r.element is self.O.elements[0]

    def test_type_focused(self):
        ev = resolve_target(Type("", "hello", submit=True), self.O, gw({})).events[0]
        assert ev.point is None and ev.text == "hello" and ev.submit

    def test_drag_order(self):
        r = resolve_target(DragAndDrop("OK", "Name"), self.O, gw({}))
        ev = r.events[0]
        assert ev.point == self.O.elements[0].center and ev.point2 == self.O.elements[1].center
        assert [e.label for e in r.elements] == ["OK", "Name"]

    def test_highlight_anchors(self):
        ev = resolve_target(HighlightTextSpan("quick", "fox"), self.O, gw({})).events[0]
        assert ev.kind == "select" and ev.point[0] < ev.point2[0]

    def test_highlight_missing_phrase(self):
        with pytest.raises(GroundingError):
            resolve_target(HighlightTextSpan("zebra", "fox"), self.O, gw({}))

    def test_keyboard_actions(self):
        assert resolve_target(Hotkey(("ctrl", "s")), self.O, gw({})).events[0].keys == ("ctrl", "s")
        ev = resolve_target(HoldAndPress(("shift",), ("tab",)), self.O, gw({})).events[0]
        assert ev.keys == ("shift", "tab")
        assert resolve_target(Open("deck.odp"), self.O, gw({})).events[0].text == "deck.odp"
        assert resolve_target(Wait(2), self.O, gw({})).events[0].seconds == 2.0

    def test_unknown_target(self):
        with pytest.raises(GroundingError):
            resolve_target(Click("Print"), self.O, gw({}))
