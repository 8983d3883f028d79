import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from typedkb.conditions import (
    MAX_DEPTH,
    All,
    Compare,
    ConditionSyntaxError,
    Const,
    Literal,
    Not,
    PredRef,
    depth,
    evaluate,
    format_condition,
    parse_condition,
    predicate_refs,
)


def test_parses_nested_combinators():
    e = parse_condition("all(hand_empty, not(lamp_here), any(target_here, inventory.count >= 1))")
    assert isinstance(e, All)
    assert [p.name for p in predicate_refs(e)] == ["hand_empty", "lamp_here", "target_here"]
    assert depth(e) == 2


def test_unicode_comparator_aliases():
    assert parse_condition("x.y ≥ 2") == parse_condition("x.y >= 2")
    assert parse_condition("x.y ≠ a") == parse_condition("x.y != a")


@pytest.mark.parametrize("bad", ["", "all(a,", "any(", "not a)", "a b", "x.y >", "all()"])
def test_syntax_errors(bad):
    with pytest.raises(ConditionSyntaxError):
        parse_condition(bad)


def test_depth_limit():
    text = "a"
    for _ in range(MAX_DEPTH + 1):
        text = f"not({text})"
    with pytest.raises(ConditionSyntaxError):
        parse_condition(text)


def test_evaluate_short_circuits():
    calls = []

    def pred(ref):
        calls.append(ref.name)
        return ref.name == "yes"

    e = parse_condition("any(yes, boom)")
    assert evaluate(e, predicate=pred, field=lambda p: None)
    assert calls == ["yes"]


def test_compare_semantics():
    fields = {"inventory.count": 2, "current.state": "open", "current.items": ["a", "b"]}
    get = fields.get
    ev = lambda t, **kw: evaluate(parse_condition(t), predicate=lambda r: False, field=get, **kw)
    assert ev("inventory.count >= 2")
    assert not ev("inventory.count < 2")
    assert ev("current.state = open")
    assert ev("current.items contains a")
    assert ev("current.state in [open, closed]")
    assert not ev("missing.field > 0")  # None never orders
    assert ev("inventory.count = $n", params={"n": 2})
    assert ev("inventory.count > @missing.field") is False


NAMES = st.sampled_from(["hand_empty", "target_here", "lamp_here", "has_unvisited"])
PATHS = st.sampled_from(["inventory.count", "current.targets", "unvisited.count"])
LEAF = st.one_of(
    st.builds(Const, st.booleans()),
    st.builds(PredRef, NAMES),
    st.builds(lambda p, op, v: Compare(p, op, Literal(v)), PATHS, st.sampled_from(["=", "!=", "<", ">="]), st.integers(0, 9)),
)
EXPRS = st.recursive(
    LEAF,
    lambda kids: st.one_of(
        st.builds(lambda xs: All(tuple(xs)), st.lists(kids, min_size=1, max_size=3)),
        st.builds(Not, kids),
    ),
    max_leaves=8,
)


@settings(max_examples=200, deadline=None)
@given(EXPRS)
def test_format_parse_roundtrip(expr):
    if depth(expr) > MAX_DEPTH:
        return
    assert parse_condition(format_condition(expr)) == expr
