"""End-to-end acceptance criteria 1-8. Each test prints one PASS/FAIL line and
records it for the terminal summary."""

import copy
import json
import random
import time

import pytest
from conftest import ACCEPTANCE
from diffgen import corrupt_doc, valid_doc

from typedkb import cli, edit_loop
from typedkb.edit_loop import ScriptedEditor, record_budget, run_loop
from typedkb.executor import run_tasks
from typedkb.household_env import family_banks, solve
from typedkb.kb import canonical_serialize, check_kb
from typedkb.kbdiff import apply_diff, diff_from_dict, try_apply
from typedkb.verifier import ablation_row, audit_decisions, evaluate_bank

FAMILY_GROUP = {
    "pick_and_place": "pick",
    "look_at_obj_in_light": "light",
    "pick_clean_then_place": "process",
    "pick_heat_then_place": "process",
    "pick_cool_then_place": "process",
}


def report(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def _group_counts(records) -> dict:
    out: dict = {}
    for r in records:
        g = FAMILY_GROUP[r.family]
        ok, n = out.get(g, (0, 0))
        out[g] = (ok + int(r.success), n + 1)
    return out


@pytest.fixture(scope="module")
def replay_run(scaffold, desk, replay_docs, tmp_path_factory):
    root = tmp_path_factory.mktemp("replay")
    t0 = time.perf_counter()
    kb, manifest = run_loop(scaffold, ScriptedEditor(replay_docs), desk, desk, max_iters=5, run_dir=root)
    return kb, manifest, root, time.perf_counter() - t0


def test_criterion_1_cold_start_replay(scaffold, desk, replay_docs):
    t0 = time.perf_counter()
    # oracle: every task is solvable and the bank has the declared family sizes
    oracle = {g: sum(1 for t in desk.tasks if FAMILY_GROUP[t.family] == g) for g in ("pick", "light", "process")}
    solvable = all(t.solution and solve(t, desk.horizon) is not None for t in desk.tasks)
    rounds = []
    kb = scaffold
    prev: dict = {}
    regressions = 0
    records = run_tasks(kb, desk.tasks)
    rounds.append(_group_counts(records))
    prev = {r.task_id: r.success for r in records}
    for doc in replay_docs:
        kb, _ = apply_diff(kb, diff_from_dict(doc))
        records = run_tasks(kb, desk.tasks)
        regressions += sum(1 for r in records if prev[r.task_id] and not r.success)
        prev = {r.task_id: r.success for r in records}
        rounds.append(_group_counts(records))
    elapsed = time.perf_counter() - t0
    expected = [
        {"pick": (0, 10), "light": (0, 6), "process": (0, 14)},
        {"pick": (10, 10), "light": (0, 6), "process": (0, 14)},
        {"pick": (10, 10), "light": (6, 6), "process": (0, 14)},
        {"pick": (10, 10), "light": (6, 6), "process": (14, 14)},
    ]
    ok = solvable and oracle == {"pick": 10, "light": 6, "process": 14} and rounds == expected and regressions == 0 and elapsed < 30
    totals = [sum(v[0] for v in r.values()) for r in rounds]
    report(1, ok, f"rounds {'/30 -> '.join(map(str, totals))}/30, regressions {regressions}, {elapsed:.1f}s")
    assert ok, rounds


def test_criterion_2_prop1_fuzz(scaffold, solved):
    rng = random.Random(20240607)
    t0 = time.perf_counter()
    n = violations = applied = corrupted = 0
    for base in (scaffold, solved):
        chained = base
        for i in range(520):
            use_chain = i % 2 == 1
            kb = chained if use_chain else base
            if rng.random() < 0.5:
                doc, _ = corrupt_doc(kb, rng)
                corrupted += 1
            else:
                doc = valid_doc(kb, rng)
            new, _ = try_apply(kb, doc)
            n += 1
            if new is None:
                continue
            applied += 1
            diag, findings = check_kb(new)
            if not diag.ok or findings:
                violations += 1
            if use_chain:
                chained = new
    elapsed = time.perf_counter() - t0
    ok = n >= 1000 and violations == 0 and elapsed < 20 and 0.4 <= corrupted / n <= 0.6
    report(2, ok, f"{n} diffs ({corrupted} corrupted, {applied} applied), {violations} violations, {elapsed:.1f}s")
    assert ok


def _harmful_docs(kb):
    docs = []
    for i, (path, prio) in enumerate(
        [
            ("procedural.rules.LookAround", 500),
            ("procedural.schemas.pick_place_chain.rules.SearchUnvisited", 1),
            ("procedural.schemas.pick_place_chain.rules.GrabTarget", 1),
        ]
    ):
        docs.append(
            {
                "layer": "L4",
                "key": path.split(".")[-1],
                "op": "modify_priority",
                "path": path,
                "payload": {"priority": prio},
                "evidence": [f"harm:{i}"],
                "metric": "desk",
                "regression_set": "desk",
                "rationale": "Reorder rules.",
                "expected_effect": "Probably worse.",
            }
        )
    docs.append(
        {
            "layer": "L4",
            "key": "DepositHeld",
            "op": "modify_rule_guard",
            "path": "procedural.schemas.pick_place_chain.rules.DepositHeld",
            "payload": {"cond": "all(task_uses_deposit, ready_to_deposit, at_goal_recep, current_accessible, task_uses_light)"},
            "evidence": ["harm:guard"],
            "metric": "desk",
            "regression_set": "desk",
            "rationale": "Tighten the deposit guard.",
            "expected_effect": "Probably worse.",
        }
    )
    return docs


@pytest.fixture(scope="module")
def reverted_run(scaffold, desk, replay_docs, tmp_path_factory):
    """Round-1 KB plus an editor proposing only harmful edits; every one must be reverted."""
    root = tmp_path_factory.mktemp("reverted")
    kb1, _ = apply_diff(scaffold, diff_from_dict(replay_docs[0]))
    kb, manifest = run_loop(kb1, ScriptedEditor(_harmful_docs(kb1)), desk, desk, max_iters=10, run_dir=root)
    return kb1, kb, manifest, root


class FuzzEditor(edit_loop.Editor):
    editor_id = "fuzz"

    def __init__(self, seed):
        self.rng = random.Random(seed)

    def _propose(self, summary, contract, kb_text, attempt):
        from typedkb.kb import parse_kb

        kb = parse_kb(kb_text)
        if self.rng.random() < 0.5:
            doc, _ = corrupt_doc(kb, self.rng)
        else:
            doc = valid_doc(kb, self.rng)
        return edit_loop.Proposal(attempt, doc.get("layer") if isinstance(doc, dict) else None, doc, self.editor_id)


@pytest.fixture(scope="module")
def fuzz_run(scaffold, desk, replay_docs, tmp_path_factory):
    root = tmp_path_factory.mktemp("fuzzloop")
    small = desk.subset("small", ["pick", "light", "clean"])
    small = type(small)("small", small.seed, small.mix, small.tasks[::3], small.horizon)
    kb1, _ = apply_diff(scaffold, diff_from_dict(replay_docs[0]))
    kb, manifest = run_loop(kb1, FuzzEditor(11), small, small, max_iters=40, run_dir=root)
    return kb1, kb, manifest, root


def test_criterion_3_prop3_rejections_leave_hash(scaffold, solved, reverted_run, fuzz_run):
    rng = random.Random(99)
    cases = violations = 0
    for base in (scaffold, solved):
        before = canonical_serialize(base)
        h = base.hash
        for _ in range(150):
            doc, _ = corrupt_doc(base, rng)
            new, _ = try_apply(base, doc)
            if new is not None:
                continue
            cases += 1
            if base.hash != h or canonical_serialize(base) != before:
                violations += 1
    loop_cases = 0
    for _, _, manifest, _ in (reverted_run, fuzz_run):
        for d in manifest["decisions"]:
            if d["verdict"] in ("reverted", "apply_failed"):
                loop_cases += 1
                if d["kb_hash_after"] != d["kb_hash_before"]:
                    violations += 1
    kb1, kb_final, manifest, _ = reverted_run
    if kb_final.hash != kb1.hash:
        violations += 1
    reverted = sum(1 for d in manifest["decisions"] if d["verdict"] == "reverted")
    total = cases + loop_cases
    ok = total >= 200 and violations == 0 and reverted == len(_harmful_docs(kb1))
    report(3, ok, f"{total} rejected cases ({cases} applier, {loop_cases} in loops, {reverted} gate-reverted), {violations} violations")
    assert ok


def test_criterion_4_prop2_audit(replay_run, fuzz_run, reverted_run):
    problems = []
    kept = 0
    for run in (replay_run, fuzz_run, reverted_run):
        manifest, root = run[-2], run[-1]
        if isinstance(root, float):  # replay_run carries elapsed time last
            manifest, root = run[1], run[2]
        problems += audit_decisions(manifest["decisions"], root)
        kept += sum(1 for d in manifest["decisions"] if d["verdict"] == "kept")
    ok = kept >= 3 and not problems
    report(4, ok, f"{kept} kept decisions re-audited from trajectories, {len(problems)} violations")
    assert ok, problems


def test_criterion_5_determinism(tmp_path, capsys):
    from typedkb.fixtures import data_path

    kb = str(data_path("solved.kb.json"))
    outs = []
    for i, jobs in enumerate([1, 1, 1, 4]):
        d = tmp_path / f"run{i}"
        assert cli.main(["kb-exec", kb, "--out", str(d), "--jobs", str(jobs)]) == 0
        outs.append(((d / "trajectories.jsonl").read_bytes(), (d / "metrics.json").read_bytes()))
    capsys.readouterr()
    same = all(o == outs[0] for o in outs)
    metrics = json.loads(outs[0][1])
    ok = same and metrics["result"] == "30/30"
    report(5, ok, f"3 runs at jobs=1 and 1 run at jobs=4 byte-identical: {same}; result {metrics['result']}")
    assert ok


def test_criterion_6_zero_editor_calls(tmp_path, capsys, monkeypatch):
    from typedkb.fixtures import data_path

    def forbidden(*a, **k):
        raise AssertionError("editor called during deployment")

    monkeypatch.setattr(edit_loop.Editor, "_propose", forbidden)
    before = edit_loop.editor_calls()
    codes = []
    for name in ("scaffold.kb.json", "solved.kb.json"):
        codes.append(cli.main(["kb-exec", str(data_path(name)), "--jobs", "2"]))
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    reported = sum(x["editor_calls"] for x in lines)
    delta = edit_loop.editor_calls() - before
    ok = codes == [0, 0] and delta == 0 and reported == 0
    report(6, ok, f"editor calls during kb-exec: counter delta {delta}, reported {reported}")
    assert ok


def test_criterion_7_ablation_signatures(solved, desk):
    full = ablation_row(solved, desk, None)
    rows = {
        "L1": ablation_row(solved, desk, "L1", "all_false"),
        "L4": ablation_row(solved, desk, "L4", "rules_removed"),
        "L7": ablation_row(solved, desk, "L7", "schemas_removed"),
        "L5": ablation_row(solved, desk, "L5", "recovery_disabled"),
        "L3": ablation_row(solved, desk, "L3", "effects_removed"),
    }
    checks = {
        "L1": rows["L1"].exec_ok == 0,
        "L4": rows["L4"].exec_ok == 0,
        "L7": rows["L7"].plan_ok == 0 and 2 * rows["L7"].exec_ok <= full.exec_ok,
        "L5": rows["L5"].exec_ok == full.exec_ok and rows["L5"].stress[1] >= 1 and rows["L5"].stress[0] < rows["L5"].stress[1] and full.stress[0] == full.stress[1],
        "L3": rows["L3"].exec_ok == full.exec_ok and rows["L3"].effect[1] >= 1 and rows["L3"].effect[0] == 0 and full.effect[0] == full.effect[1],
    }
    ok = all(checks.values()) and full.exec_ok == full.exec_total
    detail = (
        f"full {full.exec_ok}/30; L1 {rows['L1'].exec_ok}/30; L4 {rows['L4'].exec_ok}/30; "
        f"L7 exec {rows['L7'].exec_ok}/30 plan {rows['L7'].plan_ok}/{rows['L7'].plan_total}; "
        f"L5 exec {rows['L5'].exec_ok}/30 stress {rows['L5'].stress[0]}/{rows['L5'].stress[1]}; "
        f"L3 exec {rows['L3'].exec_ok}/30 effect {rows['L3'].effect[0]}/{rows['L3'].effect[1]}"
    )
    report(7, ok, detail)
    assert ok, checks


def test_criterion_8_budget(replay_run, desk):
    kb, manifest, root, elapsed = replay_run
    row = record_budget(manifest)
    on_disk = json.loads((root / "run.budget.json").read_text())
    expected_eval = (manifest["iterations"] + 1) * len(desk)
    ok = (
        row["proposals"] == 3
        and row["accepted"] == 3
        and row["apply_failed"] == 0
        and row["verifier_rejected"] == 0
        and row["eval_episodes"] == expected_eval == 120
        and not row["result_only"]
        and on_disk == row
        and kb.version == 3
        and evaluate_bank(kb, desk).successes == 30
    )
    report(8, ok, f"proposals {row['proposals']}, accepted {row['accepted']}, apply_failed {row['apply_failed']}, verifier_rejected {row['verifier_rejected']}, eval_episodes {row['eval_episodes']}")
    assert ok, row
