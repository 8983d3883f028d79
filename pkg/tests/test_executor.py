import json

import pytest

from typedkb import edit_loop
from typedkb.executor import (
    DeadEnd,
    GroundedState,
    first_match_violations,
    ground,
    policy_step,
    run_episode,
    run_tasks,
    trace_contained,
    with_admissible,
)
from typedkb.household_env import HouseholdEnv


def test_solved_kb_solves_desk(solved_records):
    assert all(r.success for r in solved_records)
    assert all(r.ended == "success" for r in solved_records)
    assert sum(r.invalid_action_count for r in solved_records) == 0


def test_scaffold_solves_nothing(scaffold, desk):
    assert not any(r.success for r in run_tasks(scaffold, desk.tasks[:6]))


def test_traces_reference_only_kb_entries(solved, solved_records):
    for r in solved_records:
        assert trace_contained(r, solved) == []


def test_fired_rule_is_first_match(solved, solved_records):
    for r in solved_records:
        assert first_match_violations(r, solved) == []


def test_first_match_detects_tampering(solved, solved_records):
    d = json.loads(solved_records[0].to_json())
    d["steps"][0]["trace"]["fired_rule"] = "DepositHeld"
    assert first_match_violations(d, solved) == [0]


def test_parallel_matches_serial(solved, desk):
    serial = [r.to_json() for r in run_tasks(solved, desk.tasks[::4])]
    parallel = [r.to_json() for r in run_tasks(solved, desk.tasks[::4], jobs=3)]
    assert serial == parallel


def test_heat_trace_follows_process_chain(solved_records):
    heat = next(r for r in solved_records if r.family == "pick_heat_then_place")
    fired = [s["trace"]["fired_rule"] for s in heat.steps]
    want = ["GrabTarget", "GoToProcessTool", "PlaceInTool", "ProcessHere", "GrabTarget", "TransportToGoal", "DepositHeld"]
    it = iter(fired)
    assert all(name in it for name in want), fired
    assert fired[-1] == "DepositHeld"


def test_trace_roles_present(solved_records):
    tr = solved_records[0].steps[0]["trace"]
    assert set(tr["entries_used"]) == {"ground", "select", "monitor", "recover", "bind"}
    assert tr["emitted_command"] == solved_records[0].steps[0]["command"]


def _first_state(kb, task):
    env = HouseholdEnv(task)
    text = env.reset()
    return ground(env.observe(text), kb, None, 0)


def test_state_roundtrip(solved, desk):
    st = _first_state(solved, desk.tasks[0])
    again = GroundedState.from_dict(json.loads(json.dumps(st.to_dict())))
    assert again.digest == st.digest


def test_recovery_picks_admissible_command(solved, desk):
    st = _first_state(solved, desk.tasks[0])
    out = policy_step(solved, st)
    assert out.primary_admissible and not out.recovered
    blocked = with_admissible(st, [c for c in st.admissible_commands if c != out.command])
    out2 = policy_step(solved, blocked)
    assert out2.recovered and not out2.primary_admissible
    assert out2.command in blocked.admissible_commands and out2.command != out.command


def test_without_recovery_inadmissible_primary_is_emitted(solved, desk):
    from typedkb.verifier import ablate_layer

    kb = ablate_layer(solved, "L5", "recovery_disabled")
    st = _first_state(kb, desk.tasks[0])
    cmd = policy_step(kb, st).command
    blocked = with_admissible(st, [c for c in st.admissible_commands if c != cmd])
    out = policy_step(kb, blocked)
    assert out.command == cmd and not out.primary_admissible and not out.recovered


def test_dead_end_without_rules(solved, desk):
    from typedkb.verifier import ablate_layer

    kb = ablate_layer(ablate_layer(solved, "L5", "recovery_disabled"), "L5", "monitors_disabled")
    kb = kb.replace(entries=tuple(e for e in kb.entries if e.entry_type not in ("rule", "policy_schema")))
    r = run_episode(kb, HouseholdEnv(desk.tasks[0]), desk.tasks[0])
    assert r.ended == "dead_end" and not r.success
    with pytest.raises(DeadEnd):
        policy_step(kb, _first_state(kb, desk.tasks[0]))


def test_execution_makes_no_editor_calls(solved, desk):
    before = edit_loop.editor_calls()
    run_tasks(solved, desk.tasks[:5])
    assert edit_loop.editor_calls() == before


def _prefixed_goto(kb):
    from typedkb.kb import KbEntry

    e = kb.find("skill", "GOTO")
    content = dict(e.content, body=[{"r": "current"}] + list(e.content["body"]))
    entries = tuple(KbEntry(x.layer, x.key, x.entry_type, content, x.provenance) if x is e else x for x in kb.entries)
    return kb.replace(entries=entries)


def test_invalid_count_when_first_binding_inadmissible(solved, desk):
    """GOTO binding the current location first gives an inadmissible primary at
    every move; recovery takes the next candidate and the step counts as invalid."""
    worse = _prefixed_goto(solved)
    recs = run_tasks(worse, desk.tasks[:3])
    assert all(r.success for r in recs)
    total = 0
    for r in recs:
        gotos = sum(1 for s in r.steps if s["trace"]["skill"] == "GOTO" and s["state"]["current_receptacle"])
        assert r.invalid_action_count == gotos
        assert r.recovery_count >= gotos
        total += gotos
    assert total > 0
