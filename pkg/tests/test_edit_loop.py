import json
import sys
import textwrap

import pytest

from typedkb import edit_loop
from typedkb.edit_loop import (
    EditorProtocolError,
    ExternalEditor,
    NullEditor,
    ScriptedEditor,
    frame,
    record_budget,
    run_loop,
    summarize,
    unframe,
)
from typedkb.fixtures import replay_dir
from typedkb.kb import load_kb


@pytest.fixture(scope="module")
def pick(desk):
    return desk.subset("pick", ["pick"])


def test_scripted_round_one(scaffold, pick, replay_docs, tmp_path):
    kb, manifest = run_loop(scaffold, ScriptedEditor(replay_docs[:1]), pick, pick, max_iters=3, run_dir=tmp_path)
    assert manifest["stop"] == "focused_ceiling"
    assert kb.version == 1 and manifest["final"]["protected"]["successes"] == 10
    exp = kb.of_type("experience")
    assert len(exp) == 1 and exp[0].content["status"] == "kept"
    assert exp[0].content["focused"] == {"before": "0/10", "after": "10/10"}
    for name in ("contract.json", "kb.v0.json", "kb.v1.json", "run.gates.jsonl", "run.budget.json", "run.manifest.json"):
        assert (tmp_path / name).exists(), name
    assert load_kb(tmp_path / "kb.v1.json").hash == kb.hash
    assert (tmp_path / "kb.v1.json.sha256").read_text().strip() == kb.hash
    assert list((tmp_path / "traj").glob("*.traj.jsonl"))


def test_scripted_editor_reads_directory(scaffold, desk):
    ed = ScriptedEditor(replay_dir())
    first = ed.propose({}, {}, "", 0)
    assert first.diff["op"] == "add_policy_schema"
    assert ed.editor_id.startswith("scripted:")


def test_null_editor_stops(scaffold, pick):
    kb, manifest = run_loop(scaffold, NullEditor(), pick, pick, max_iters=4)
    assert manifest["stop"] == "no_proposal" and manifest["iterations"] == 0
    assert kb.hash == scaffold.hash


def test_max_iters_zero(scaffold, pick):
    before = edit_loop.editor_calls()
    kb, manifest = run_loop(scaffold, ScriptedEditor([]), pick, pick, max_iters=0)
    assert edit_loop.editor_calls() == before
    assert kb.hash == scaffold.hash and manifest["stop"] == "max_iters" and manifest["decisions"] == []


def test_malformed_proposal_is_apply_failed(scaffold, pick, tmp_path):
    bad = {"layer": "L4", "op": "add_rule", "path": "procedural.rules"}
    kb, manifest = run_loop(scaffold, ScriptedEditor([bad, {"diffs": []}]), pick, pick, max_iters=2, run_dir=tmp_path)
    assert kb.hash == scaffold.hash
    assert [d["verdict"] for d in manifest["decisions"]] == ["apply_failed", "apply_failed"]
    assert manifest["decisions"][1]["stage"] == "protocol"
    assert all(d["kb_hash_after"] == d["kb_hash_before"] == scaffold.hash for d in manifest["decisions"])
    row = record_budget(manifest)
    assert row["apply_failed"] == 2 and row["proposals"] == 2 and not row["result_only"]


def test_no_gain_is_reverted(scaffold, desk, replay_docs):
    light = desk.subset("light", ["light"])
    kb, manifest = run_loop(scaffold, ScriptedEditor([replay_docs[0]]), light, light, max_iters=1)
    (d,) = manifest["decisions"]
    assert (d["verdict"], d["reason"]) == ("reverted", "no focused gain")
    assert kb.hash == scaffold.hash and not kb.of_type("experience")


def test_result_only_flag():
    manifest = {"decisions": [{"verdict": "kept"}], "budget": {"attempts": 3, "eval_episodes": 9}}
    assert record_budget(manifest)["result_only"]


def test_summarize_is_bounded_and_seeded(scaffold, desk):
    from typedkb.executor import run_tasks

    recs = run_tasks(scaffold, desk.tasks)
    s = summarize(recs, k=5, seed=1)
    assert len(s["failures"]) == 5 and s["successes"] == 0
    assert summarize(recs, k=5, seed=1) == s
    assert summarize(recs, k=5, seed=2)["failures"] != s["failures"]
    small = summarize(recs, k=5, seed=1, byte_budget=3000)
    assert len(json.dumps(small, sort_keys=True).encode()) <= 3000 or not small["failures"]
    assert len(small["failures"]) < 5


def test_frame_roundtrip():
    doc = {"a": [1, 2], "é": "x"}
    assert unframe(frame(doc)) == doc
    with pytest.raises(EditorProtocolError):
        unframe(b"no header")
    with pytest.raises(EditorProtocolError):
        unframe(b"Content-Length: 50\r\n\r\n{}")


CHILD = textwrap.dedent(
    """
    import json, sys
    data = sys.stdin.buffer.read()
    head, _, body = data.partition(b"\\r\\n\\r\\n")
    req = json.loads(body)
    diff = json.loads(open(sys.argv[1]).read())
    assert "summary" in req and "kb" in req and "contract" in req
    out = json.dumps({"diff": diff, "note": "from child"}).encode()
    sys.stdout.buffer.write(b"Content-Length: %d\\r\\n\\r\\n" % len(out) + out)
    """
)


def test_external_editor_round(scaffold, pick, replay_docs, tmp_path):
    script = tmp_path / "child.py"
    script.write_text(CHILD)
    diff = tmp_path / "d.json"
    diff.write_text(json.dumps(replay_docs[0]))
    ed = ExternalEditor([sys.executable, str(script), str(diff)], timeout=30)
    kb, manifest = run_loop(scaffold, ed, pick, pick, max_iters=2)
    assert [d["verdict"] for d in manifest["decisions"]] == ["kept"]
    assert ed.last_request_digest and manifest["request_digests"]


def test_external_editor_failure_and_timeout(tmp_path):
    bad = ExternalEditor([sys.executable, "-c", "import sys; sys.exit(3)"], timeout=30)
    with pytest.raises(EditorProtocolError):
        bad.propose({}, {}, "")
    slow = ExternalEditor([sys.executable, "-c", "import time; time.sleep(5)"], timeout=0.5)
    assert slow.propose({}, {}, "").empty
