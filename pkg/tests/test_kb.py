import json

import pytest

from typedkb.fixtures import data_path, scaffold_kb, solved_kb
from typedkb.kb import (
    ParseError,
    PathError,
    canonical_serialize,
    check_kb,
    kb_from_document,
    load_kb,
    parse_kb,
    resolve_path,
    to_yaml,
    write_kb,
)


def test_shipped_kbs_are_well_formed(scaffold, solved):
    for kb in (scaffold, solved):
        types, refs = check_kb(kb)
        assert types.ok and not refs


def test_sidecar_matches_hash(scaffold, solved):
    for kb, name in ((scaffold, "scaffold.kb.json"), (solved, "solved.kb.json")):
        side = data_path(name + ".sha256").read_text().strip()
        assert side == kb.hash


def test_roundtrip_json_and_yaml(solved, tmp_path):
    again = parse_kb(canonical_serialize(solved))
    assert again.hash == solved.hash
    assert parse_kb(to_yaml(solved)).hash == solved.hash
    h = write_kb(solved, tmp_path / "k.yaml")
    assert load_kb(tmp_path / "k.yaml").hash == h
    assert (tmp_path / "k.yaml.sha256").read_text().strip() == h


def test_hash_ignores_key_order(solved):
    doc = json.loads(canonical_serialize(solved))
    shuffled = json.dumps(dict(reversed(list(doc.items()))))
    assert parse_kb(shuffled).hash == solved.hash


def test_policy_digest_ignores_experience_and_version(scaffold, replay_docs):
    from typedkb.kbdiff import apply_diff, diff_from_dict

    bumped = scaffold.replace(version=scaffold.version + 5, metadata={"note": "x"})
    assert bumped.hash != scaffold.hash
    assert bumped.policy_digest == scaffold.policy_digest
    edited, _ = apply_diff(scaffold, diff_from_dict(replay_docs[0]))
    assert edited.policy_digest != scaffold.policy_digest


def test_builders_match_shipped_data(scaffold, solved):
    assert scaffold_kb().hash == scaffold.hash
    assert solved_kb().hash == solved.hash


def _doc(kb):
    return json.loads(canonical_serialize(kb))


def test_syntax_error_has_line():
    with pytest.raises(ParseError) as ei:
        parse_kb('{\n  "version": 0,\n  "predicates": {\n')
    assert ei.value.kind == "syntax" and ei.value.line is not None


def test_unknown_section_is_schema_error(scaffold):
    doc = _doc(scaffold)
    doc["mystery"] = {}
    with pytest.raises(ParseError) as ei:
        parse_kb(json.dumps(doc))
    assert ei.value.kind == "schema"


def test_dangling_reference(scaffold):
    doc = _doc(scaffold)
    rule = doc["procedural"]["rules"][0]
    rule["cond"] = "ghost_predicate"
    with pytest.raises(ParseError) as ei:
        parse_kb(json.dumps(doc))
    assert ei.value.kind == "dangling-reference"
    assert "ghost_predicate" in str(ei.value)


def test_bad_priority_type(scaffold):
    doc = _doc(scaffold)
    doc["procedural"]["rules"][0]["priority"] = "high"
    with pytest.raises(ParseError) as ei:
        parse_kb(json.dumps(doc))
    assert ei.value.kind == "schema"


def test_object_fact_and_prior_share_keys(solved):
    classes = {e.key for e in solved.of_type("object_fact")} & {e.key for e in solved.of_type("spatial_prior")}
    assert classes, "fixture should exercise shared L2 keys"
    k = sorted(classes)[0]
    assert solved.find("object_fact", k).entry_type == "object_fact"
    assert solved.find("spatial_prior", k).entry_type == "spatial_prior"


def test_duplicate_key_rejected(scaffold):
    doc = _doc(scaffold)
    doc["procedural"]["rules"].append(dict(doc["procedural"]["rules"][0]))
    with pytest.raises(ParseError):
        kb_from_document(doc)


def test_resolve_path(solved):
    loc = resolve_path(solved, "predicates.hand_empty")
    assert loc.layer == "L1" and loc.entry_key == "hand_empty"
    rule = solved.of_type("rule")[0].key
    assert resolve_path(solved, f"procedural.rules.{rule}").entry_type == "rule"
    with pytest.raises(PathError):
        resolve_path(solved, "predicates.nope")


def test_kb_is_immutable(scaffold):
    with pytest.raises(Exception):
        scaffold.version = 9
