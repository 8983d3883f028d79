"""Seeded random KBDiff documents for the applier property suites.

``valid_doc`` builds a diff that should normally apply to ``kb``;
``corrupt_doc`` damages one aspect of such a diff.
"""

from __future__ import annotations

import copy
import random

from typedkb.kbdiff import OPS
from typedkb.vocab import SELECTORS

RULE_TEXT = {"rationale": "Generated rule.", "expected_effect": "Unknown."}
GUARD_POOL = [
    "hand_empty",
    "target_here",
    "holds_target",
    "has_unvisited",
    "current_accessible",
    "current_openable_closed",
    "lamp_here",
    "task_uses_light",
]
FIELD_RULES = [
    "inventory.count >= 1",
    "current.targets >= 2",
    "unvisited.count = 0",
    "current.open_state = closed",
    "all(hand_empty, current.lamps >= 1)",
]


def _env(layer, key, op, path, payload, rng):
    return {
        "layer": layer,
        "key": key,
        "op": op,
        "path": path,
        "payload": payload,
        "evidence": [f"fuzz:{rng.randrange(10**6)}"],
        "metric": "desk",
        "regression_set": "desk",
        "rationale": "Generated edit.",
        "expected_effect": "None in particular.",
    }


def _guard(rng, k=None):
    names = rng.sample(GUARD_POOL, k or rng.randint(1, 3))
    if len(names) == 1:
        return names[0] if rng.random() < 0.7 else f"not({names[0]})"
    return f"{rng.choice(['all', 'any'])}({', '.join(names)})"


def _rule_paths(kb):
    out = []
    for e in kb.of_type("rule"):
        out.append(f"procedural.rules.{e.key}")
    for e in kb.of_type("policy_schema"):
        for r in e.content.get("rules", []):
            out.append(f"procedural.schemas.{e.key}.rules.{r['name']}")
    return out


def _fresh(rng, stem):
    # rule names are CamelCase without underscores
    sep = "" if stem[0].isupper() and not stem.isupper() else "_"
    return f"{stem}{sep}{rng.randrange(10**6)}"


def valid_doc(kb, rng: random.Random, op: str | None = None) -> dict:
    op = op or rng.choice(OPS)
    skills = sorted(e.key for e in kb.of_type("skill"))
    if op == "add_predicate":
        name = _fresh(rng, "p")
        rule = rng.choice(FIELD_RULES)
        return _env("L1", name, op, "predicates", {"predicate": {"name": name, "params": [], "eval_rule": rule}}, rng)
    if op == "modify_threshold":
        if rng.random() < 0.5:
            return _env("L1", "has_unvisited", op, "predicates.has_unvisited.threshold", {"value": rng.randint(1, 8)}, rng)
        return _env("L0", "contents", op, "grounding.contents.threshold", {"value": rng.randint(1, 32), "source_field": "location_contents"}, rng)
    if op == "add_rule":
        name = _fresh(rng, "Rule")
        schemas = sorted(e.key for e in kb.of_type("policy_schema"))
        path = "procedural.rules"
        if schemas and rng.random() < 0.5:
            path = f"procedural.schemas.{rng.choice(schemas)}.rules"
        rule = {"name": name, "priority": rng.randint(1, 99), "cond": _guard(rng), "action": rng.choice(skills), **RULE_TEXT}
        return _env("L4", name, op, path, {"rule": rule}, rng)
    if op == "modify_rule_guard":
        path = rng.choice(_rule_paths(kb))
        return _env("L4", path.split(".")[-1], op, path, {"cond": _guard(rng)}, rng)
    if op == "modify_priority":
        path = rng.choice(_rule_paths(kb))
        return _env("L4", path.split(".")[-1], op, path, {"priority": rng.randint(0, 200)}, rng)
    if op == "add_policy_schema":
        name = _fresh(rng, "schema")
        rule = {"name": _fresh(rng, "SRule"), "priority": rng.randint(1, 99), "cond": _guard(rng), "action": rng.choice(skills), **RULE_TEXT}
        schema = {"name": name, "termination": "goal_satisfied", "rules": [rule]}
        if rng.random() < 0.5:
            schema["guard"] = _guard(rng, 1)
        return _env("L4", name, op, "procedural.schemas", {"schema": schema}, rng)
    if op == "add_skill":
        base = copy.deepcopy(kb.find("skill", rng.choice(skills)).content)
        base["name"] = _fresh(rng, "SKILL")
        return _env("L4", base["name"], op, "procedural.skills", {"skill": base}, rng)
    if op == "extend_skill_body":
        sk = kb.find("skill", rng.choice(skills)).content
        clause = {p: rng.choice(sorted(SELECTORS)) for p in sk.get("params", [])}
        return _env("L4", sk["name"], op, f"procedural.skills.{sk['name']}", {"clause": clause}, rng)
    if op == "add_operator_schema":
        ops = sorted(e.key for e in kb.of_type("operator"))
        base = copy.deepcopy(kb.find("operator", rng.choice(ops)).content)
        base["name"] = _fresh(rng, "op")
        return _env("L3", base["name"], op, "operators", {"operator": base}, rng)
    if op == "add_task_schema":
        ts = sorted(e.key for e in kb.of_type("task_schema"))
        base = copy.deepcopy(kb.find("task_schema", rng.choice(ts)).content)
        base["name"] = _fresh(rng, "task")
        base["task_family"] = base["name"]
        return _env("L7", base["name"], op, "goals.task_schemas", {"task_schema": base}, rng)
    if op == "add_goal_fact":
        name = _fresh(rng, "gf")
        fact = rng.choice(["process", "light", "count"])
        value = {"process": rng.choice(["heat", "cool", "clean", None]), "light": rng.random() < 0.5, "count": rng.randint(1, 3)}[fact]
        return _env("L7", name, op, "goals.facts", {"goal_fact": {"name": name, "task_family": name, "fact": fact, "value": value}}, rng)
    if op in ("add_monitor", "add_recovery_rule"):
        etype = "monitor" if op == "add_monitor" else "recovery"
        name = _fresh(rng, etype)
        trigger = _guard(rng) if etype == "monitor" else "any(not(command_admissible), not(bind_ok))"
        content = {"name": name, "trigger": trigger, "repair_target": "LOOK", "protected_scope": "desk"}
        container = "monitoring.monitors" if etype == "monitor" else "monitoring.recovery"
        return _env("L5", name, op, container, {etype: content}, rng)
    if op == "append_experience":
        evid = _fresh(rng, "exp")
        content = {
            "evidence_id": evid,
            "trajectories": ["traj/x.jsonl"],
            "hypothesis": {"op": "add_rule"},
            "focused": {"before": "0/1", "after": "1/1"},
            "protected": {"before": "1/1", "after": "1/1"},
            "status": rng.choice(["kept", "reverted", "apply_failed"]),
        }
        return _env("L6", evid, op, "experience", {"experience": content}, rng)
    if op == "declare_source_binding":
        name = _fresh(rng, "bind")
        content = {"name": name, "field": rng.choice(["location", "picked", "goal"]), "slot": name, "semantic_type": rng.choice(["receptacle", "object"])}
        return _env("S0", name, op, "source.bindings", {"binding": content}, rng)
    if op == "add_object_fact":
        if rng.random() < 0.3:
            cls = _fresh(rng, "thing")
            return _env("L2", cls, op, "semantic.spatial_priors", {"class": cls, "receptacles": ["desk", "shelf"]}, rng)
        existing = sorted(e.key for e in kb.of_type("object_fact"))
        cls = rng.choice(existing) if rng.random() < 0.5 else _fresh(rng, "thing")
        return _env("L2", cls, op, "semantic.objects", {"class": cls, "facts": {rng.choice(["openable", "portable", "light_source"]): rng.random() < 0.5}}, rng)
    raise AssertionError(op)


def _drop(d, path):
    node = d
    for p in path[:-1]:
        node = node[p]
    node.pop(path[-1], None)


CORRUPTIONS = (
    "drop_field",
    "unknown_op",
    "wrong_layer",
    "bad_path",
    "ghost_predicate",
    "duplicate",
    "threshold_oob",
    "payload_type",
    "syntax",
    "extra_field",
    "evidence_type",
    "empty_payload",
)


def corrupt_doc(kb, rng: random.Random, op: str | None = None) -> tuple[dict, str]:
    doc = valid_doc(kb, rng, op)
    kind = rng.choice(CORRUPTIONS)
    if kind == "drop_field":
        _drop(doc, [rng.choice(["layer", "key", "op", "path", "payload", "evidence", "metric", "regression_set", "rationale", "expected_effect"])])
    elif kind == "unknown_op":
        doc["op"] = "delete_everything"
    elif kind == "wrong_layer":
        doc["layer"] = rng.choice([l for l in ("S0", "L0", "L1", "L2", "L3", "L4", "L5", "L6", "L7") if l != doc["layer"]])
    elif kind == "bad_path":
        doc["path"] = doc["path"] + ".nowhere.at.all" if rng.random() < 0.5 else "missing_root." + doc["path"]
    elif kind == "ghost_predicate":
        doc = valid_doc(kb, rng, rng.choice(["add_rule", "modify_rule_guard", "add_predicate"]))
        if doc["op"] == "add_rule":
            doc["payload"]["rule"]["cond"] = "all(hand_empty, ghost_predicate_xyz)"
        elif doc["op"] == "modify_rule_guard":
            doc["payload"]["cond"] = "ghost_predicate_xyz"
        else:
            doc["payload"]["predicate"]["eval_rule"] = "not(ghost_predicate_xyz)"
    elif kind == "duplicate":
        doc = valid_doc(kb, rng, rng.choice(["add_predicate", "add_skill", "add_rule"]))
        if doc["op"] == "add_predicate":
            doc["payload"]["predicate"]["name"] = doc["key"] = "hand_empty"
        elif doc["op"] == "add_skill":
            doc["payload"]["skill"]["name"] = doc["key"] = "GOTO"
        else:
            existing = _rule_paths(kb)[0].split(".")[-1]
            doc["payload"]["rule"]["name"] = doc["key"] = existing
    elif kind == "threshold_oob":
        doc = valid_doc(kb, rng, "modify_threshold")
        doc["payload"]["value"] = rng.choice([0, -3, 99, 1000.5])
    elif kind == "payload_type":
        doc["payload"] = rng.choice([[], "text", 3])
    elif kind == "syntax":
        doc = valid_doc(kb, rng, rng.choice(["add_rule", "modify_rule_guard"]))
        bad = rng.choice(["all(hand_empty,", "any(", "not hand_empty)", "a b c", ""])
        if doc["op"] == "add_rule":
            doc["payload"]["rule"]["cond"] = bad
        else:
            doc["payload"]["cond"] = bad
    elif kind == "extra_field":
        if rng.random() < 0.5:
            doc["surprise"] = True
        else:
            doc["payload"]["surprise"] = True
    elif kind == "evidence_type":
        doc["evidence"] = rng.choice(["not-a-list", [1, 2], None])
    elif kind == "empty_payload":
        doc["payload"] = {}
    return doc, kind
