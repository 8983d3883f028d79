from fractions import Fraction

import pytest
from test_executor import _prefixed_goto

from typedkb.fixtures import smoke_suite_docs
from typedkb.kb import canonical_serialize
from typedkb.kbdiff import apply_diff, diff_from_dict
from typedkb.verifier import (
    ABLATIONS,
    BankMetrics,
    EvalCache,
    ExecutableError,
    HealthVector,
    UnknownVariant,
    ablate_layer,
    accept,
    audit_decisions,
    decide,
    ensure_executable,
    evaluate_bank,
    metrics_from_records,
    persist_decision,
    plan_progress,
    read_trajectory_file,
    smoke_apply,
    smoke_execute,
    write_trajectories,
)


def _m(ok, n, invalid=0, steps=None, rec=0, prog=0):
    return BankMetrics("b", ok, n, HealthVector(invalid, None if steps is None else Fraction(steps), rec, Fraction(prog)))


# decision table: (focus_before, focus_after, protect_before, protect_after, health) -> verdict, reason
GATE_CASES = [
    (_m(3, 10), _m(4, 10), _m(5, 10), _m(5, 10), False, "kept", "focused gain"),
    (_m(3, 10), _m(9, 10), _m(5, 10), _m(4, 10), False, "reverted", "protected regression"),
    (_m(3, 10), _m(3, 10), _m(5, 10), _m(5, 10), False, "reverted", "no focused gain"),
    (_m(3, 10), _m(2, 10), _m(5, 10), _m(6, 10), False, "reverted", "focused regression"),
    (_m(3, 10, invalid=4), _m(3, 10, invalid=1), _m(5, 10), _m(5, 10), True, "kept", "focused health gain"),
    (_m(3, 10, invalid=4), _m(3, 10, invalid=1), _m(5, 10), _m(5, 10), False, "reverted", "no focused gain"),
    (_m(3, 10, steps=9), _m(3, 10, steps=9), _m(5, 10), _m(5, 10), True, "reverted", "no focused gain or health gain"),
    # exact rationals: 1/3 vs 333/1000 must not round together
    (_m(333, 1000), _m(1, 3), _m(1, 1), _m(1, 1), False, "kept", "focused gain"),
]


@pytest.mark.parametrize("fb,fa,pb,pa,health,verdict,reason", GATE_CASES)
def test_decide_table(fb, fa, pb, pa, health, verdict, reason):
    assert decide(fb, fa, pb, pa, health) == (verdict, reason)


def test_health_order():
    base = HealthVector(2, Fraction(10), 1, Fraction(1, 2))
    assert HealthVector(1, Fraction(99), 9, Fraction(0)).improves_on(base)
    assert HealthVector(2, Fraction(9), 9, Fraction(0)).improves_on(base)
    assert HealthVector(2, Fraction(10), 0, Fraction(0)).improves_on(base)
    assert HealthVector(2, Fraction(10), 1, Fraction(3, 4)).improves_on(base)
    assert not base.improves_on(base)
    assert HealthVector(2, Fraction(50), 1, Fraction(0)).improves_on(HealthVector(2, None, 1, Fraction(1)))


def test_health_roundtrip():
    h = HealthVector(3, Fraction(28, 3), 2, Fraction(5, 7))
    assert HealthVector.from_dict(h.to_dict()) == h


def test_accept_focused_gain(scaffold, desk, replay_docs):
    kb1, _ = apply_diff(scaffold, diff_from_dict(replay_docs[0]))
    d = accept(scaffold, kb1, desk, desk)
    assert (d.verdict, d.reason) == ("kept", "focused gain")
    assert d.focus_after.successes == 10 and d.focus_before.successes == 0


def test_accept_health_gain_on_shorter_episodes(solved, desk):
    """Dropping spatial priors keeps 30/30 but lengthens successful episodes."""
    worse = ablate_layer(solved, "L2", "priors_removed")
    cache = EvalCache()
    d = accept(worse, solved, desk, desk, health_declared=True, cache=cache)
    assert d.focus_before.successes == d.focus_after.successes == 30
    assert d.focus_before.health.mean_success_steps == Fraction(28, 3)
    assert d.focus_after.health.mean_success_steps == Fraction(19, 2)
    # 19/2 > 28/3: the solved KB takes more steps on average, so no health gain
    assert (d.verdict, d.reason) == ("reverted", "no focused gain or health gain")
    back = accept(solved, worse, desk, desk, health_declared=True, cache=cache)
    assert (back.verdict, back.reason) == ("kept", "focused health gain")


def test_accept_health_gain_on_invalid_actions(solved, desk):
    d = accept(_prefixed_goto(solved), solved, desk, desk, health_declared=True)
    assert d.focus_before.successes == d.focus_after.successes
    assert d.focus_before.health.invalid_action_count > 0 == d.focus_after.health.invalid_action_count
    assert (d.verdict, d.reason) == ("kept", "focused health gain")


def test_eval_cache_reuses_episodes(solved, desk):
    cache = EvalCache()
    evaluate_bank(solved, desk, cache=cache)
    n = cache.episodes
    evaluate_bank(solved.replace(version=9), desk, cache=cache)
    assert cache.episodes == n == len(desk)


def test_persist_and_audit(scaffold, desk, replay_docs, tmp_path):
    kb1, _ = apply_diff(scaffold, diff_from_dict(replay_docs[0]))
    d = accept(scaffold, kb1, desk, desk)
    persist_decision(d, tmp_path)
    doc = d.to_dict()
    assert audit_decisions([doc], tmp_path) == []
    doc["focus_after"]["successes"] = 11
    assert audit_decisions([doc], tmp_path)


def test_audit_flags_tampered_trajectory(scaffold, desk, replay_docs, tmp_path):
    kb1, _ = apply_diff(scaffold, diff_from_dict(replay_docs[0]))
    d = accept(scaffold, kb1, desk, desk)
    persist_decision(d, tmp_path)
    path = tmp_path / d.trajectories["focus_after"]
    path.write_text(path.read_text().replace('"success":true', '"success":false'))
    assert audit_decisions([d.to_dict()], tmp_path)


def test_trajectory_file_roundtrip(solved_records, tmp_path):
    digest = write_trajectories(solved_records[:4], tmp_path / "t.jsonl", header={"kb": "x"})
    header, recs = read_trajectory_file(tmp_path / "t.jsonl")
    assert header == {"kb": "x"} and len(digest) == 64
    assert [r.to_json() for r in recs] == [r.to_json() for r in solved_records[:4]]


def test_plan_progress(solved_records):
    r = solved_records[0]
    assert plan_progress(r) == 1
    failed = type(r)(**{**r.to_dict(), "success": False, "steps": r.steps[:1]})
    assert 0 < plan_progress(failed) < 1
    assert metrics_from_records(solved_records).M == 1


def test_smoke_apply_suite():
    rep = smoke_apply(smoke_suite_docs())
    assert rep.ok and len(rep.applied) == 7 and len(rep.rejected) == 7
    flipped = [(n, d, not s) for n, d, s in smoke_suite_docs()]
    assert len(smoke_apply(flipped).mismatches) == 14


def test_smoke_execute(solved, scaffold, desk):
    rep = smoke_execute(solved, desk, n=5)
    assert rep.successes == rep.episodes == 5 and rep.failures == []
    cold = smoke_execute(scaffold, desk, n=5)
    assert cold.successes == 0 and cold.failures


def test_ensure_executable_rejects_dangling(solved):
    kb = ablate_layer(solved, "L1", "all_false")
    ensure_executable(kb)  # predicates still resolve
    broken = solved.replace(entries=tuple(e for e in solved.entries if e.entry_type != "predicate"))
    with pytest.raises(ExecutableError):
        ensure_executable(broken)


def test_unknown_variant(solved):
    with pytest.raises(UnknownVariant):
        ablate_layer(solved, "L9")
    with pytest.raises(UnknownVariant):
        ablate_layer(solved, "L3", "everything_removed")


@pytest.mark.parametrize("layer,variant", [(l, v) for l, vs in ABLATIONS.items() for v in vs])
def test_ablation_is_non_destructive(solved, layer, variant):
    before = canonical_serialize(solved)
    out = ablate_layer(solved, layer, variant)
    assert canonical_serialize(solved) == before
    assert not out.deployable and solved.deployable
    assert out.metadata["intervention"] == {"layer": layer, "variant": variant, "base_hash": solved.hash}
