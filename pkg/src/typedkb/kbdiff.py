"""Typed KB edits: parsing, admission, validation and deterministic application.

A rejected edit never touches the input KB; the caller gets a
:class:`DiffRejected` carrying the audit record of the first failing check.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass

import yaml

from . import conditions as cx
from .kb import (
    LAYOUT,
    CheckResult,
    Diagnostic,
    KbEntry,
    KnowledgeBase,
    PathError,
    _dumps,
    resolve_path,
    resolve_references,
    type_check_entry,
    type_check_kb,
)
from .vocab import SELECTORS

ADMISSION_CHECKS = {
    "S0": "Source contract exists and learned-policy claims do not mutate oracle state.",
    "L0": "Payload declares object type, units, source field, and uncertainty or threshold when applicable.",
    "L1": "Typed arguments resolve to grounded fields; thresholds are bounded and verifier-visible.",
    "L2": "Object class is known or declared; affordance is consumed by a valid operator or schema.",
    "L3": "Preconditions and effects resolve to predicates; emitted skill/action type-checks.",
    "L4": "Rule guards resolve to predicates; priority is explicit; termination condition exists.",
    "L5": "Trigger, repair target, and protected regression scope are declared.",
    "L6": "Evidence id, focused metric, protected metric, and status are present.",
    "L7": "Decomposition resolves to operators or policy schemas; terminal condition is verifier-measurable.",
}

_ADMITTED = {
    "S0": ("declare_source_binding",),
    "L0": ("modify_threshold",),
    "L1": ("add_predicate", "modify_threshold"),
    "L2": ("add_object_fact",),
    "L3": ("add_operator_schema",),
    "L4": ("add_rule", "modify_rule_guard", "modify_priority", "add_policy_schema", "add_skill", "extend_skill_body"),
    "L5": ("add_monitor", "add_recovery_rule"),
    "L6": ("append_experience",),
    "L7": ("add_task_schema", "add_goal_fact"),
}

# op -> (payload key holding the entry, entry type) for ops that add a whole entry
ADD_OPS = {
    "add_predicate": ("predicate", "predicate"),
    "add_rule": ("rule", "rule"),
    "add_policy_schema": ("schema", "policy_schema"),
    "add_skill": ("skill", "skill"),
    "add_operator_schema": ("operator", "operator"),
    "add_task_schema": ("task_schema", "task_schema"),
    "add_goal_fact": ("goal_fact", "goal_fact"),
    "add_monitor": ("monitor", "monitor"),
    "add_recovery_rule": ("recovery", "recovery"),
    "append_experience": ("experience", "experience"),
    "declare_source_binding": ("binding", "source_binding"),
}
MODIFY_OPS = ("modify_threshold", "modify_rule_guard", "modify_priority", "extend_skill_body")
OPS = tuple(sorted(set(ADD_OPS) | set(MODIFY_OPS) | {"add_object_fact"}))

REQUIRED_FIELDS = ("layer", "key", "op", "path", "payload", "evidence", "metric", "regression_set", "rationale", "expected_effect")


class SchemaError(ValueError):
    def __init__(self, message: str, field_path: str | None = None):
        super().__init__(message)
        self.field_path = field_path


@dataclass(frozen=True)
class KbDiff:
    layer: str
    key: str
    op: str
    path: str
    payload: dict
    evidence: tuple
    metric: str
    regression_set: str
    rationale: str
    expected_effect: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["evidence"] = list(self.evidence)
        return d

    def to_json(self) -> str:
        return _dumps(self.to_dict())


@dataclass(frozen=True)
class ApplyAudit:
    op: str
    path: str
    rationale: str
    expected_effect: str
    before_snippet: str | None
    after_snippet: str | None
    outcome: str
    reason: str | None = None
    stage: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class DiffRejected(Exception):
    def __init__(self, audit: ApplyAudit):
        super().__init__(f"{audit.stage}: {audit.reason}")
        self.audit = audit
        self.stage = audit.stage
        self.reason = audit.reason


def admission_matrix() -> dict:
    """Layer -> {op: required checks}."""
    return {layer: {op: ADMISSION_CHECKS[layer] for op in ops} for layer, ops in _ADMITTED.items()}


def admitted(layer: str, op: str) -> bool:
    return op in _ADMITTED.get(layer, ())


# ---------------------------------------------------------------- parsing


def _payload_entry_check(etype: str, content: dict, base: str):
    layer = LAYOUT[etype][0]
    key_field = {"object_fact": "class", "spatial_prior": "class", "experience": "evidence_id"}.get(etype, "name")
    entry = KbEntry(layer, content.get(key_field) or "_", etype, content)
    res = type_check_entry(entry, layer, base=base)
    if not res.ok:
        d = res.diagnostics[0]
        raise SchemaError(f"{d.path}: {d.message}", d.path)


def _check_payload(op: str, payload: dict, path: str):
    if op in ADD_OPS:
        pkey, etype = ADD_OPS[op]
        content = payload.get(pkey)
        if content is None:
            raise SchemaError(f"payload.{pkey} missing", f"payload.{pkey}")
        if not isinstance(content, dict):
            raise SchemaError(f"payload.{pkey} must be a map", f"payload.{pkey}")
        extra = set(payload) - {pkey}
        if extra:
            raise SchemaError(f"payload has unknown field {sorted(extra)[0]!r}", "payload")
        if etype == "rule":
            probe = dict(content)
            probe.setdefault("priority", 0)
            if "action" not in content:
                raise SchemaError("payload.rule.action missing", "payload.rule.action")
            _payload_entry_check(etype, probe, f"payload.{pkey}")
        else:
            _payload_entry_check(etype, content, f"payload.{pkey}")
        return
    if op == "add_object_fact":
        if path.startswith("semantic.spatial_priors"):
            etype = "spatial_prior"
        else:
            etype = "object_fact"
        if set(payload) != ({"class", "receptacles"} if etype == "spatial_prior" else {"class", "facts"}):
            missing = [k for k in (("class", "receptacles") if etype == "spatial_prior" else ("class", "facts")) if k not in payload]
            raise SchemaError(f"payload.{missing[0]} missing" if missing else "payload has unknown fields", "payload")
        _payload_entry_check(etype, payload, "payload")
        return
    if op == "modify_threshold":
        v = payload.get("value")
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError("payload.value missing or not numeric", "payload.value")
        extra = set(payload) - {"value", "source_field", "units"}
        if extra:
            raise SchemaError(f"payload has unknown field {sorted(extra)[0]!r}", "payload")
        return
    if op == "modify_rule_guard":
        c = payload.get("cond")
        if not isinstance(c, str) or not c:
            raise SchemaError("payload.cond missing", "payload.cond")
        try:
            expr = cx.parse_condition(c)
        except cx.ConditionSyntaxError as exc:
            raise SchemaError(f"payload.cond syntax error: {exc}", "payload.cond") from None
        if cx.comparisons(expr):
            raise SchemaError("payload.cond may only use predicates", "payload.cond")
        if set(payload) != {"cond"}:
            raise SchemaError("payload has unknown fields", "payload")
        return
    if op == "modify_priority":
        p = payload.get("priority")
        if isinstance(p, bool) or not isinstance(p, int):
            raise SchemaError("payload.priority missing or not an integer", "payload.priority")
        if set(payload) != {"priority"}:
            raise SchemaError("payload has unknown fields", "payload")
        return
    if op == "extend_skill_body":
        clause = payload.get("clause")
        if not isinstance(clause, dict):
            raise SchemaError("payload.clause missing", "payload.clause")
        for p, sel in clause.items():
            if sel not in SELECTORS:
                raise SchemaError(f"payload.clause.{p} unknown selector {sel!r}", f"payload.clause.{p}")
        if set(payload) != {"clause"}:
            raise SchemaError("payload has unknown fields", "payload")
        return
    raise SchemaError(f"unknown op {op!r}", "op")  # pragma: no cover


def diff_from_dict(doc) -> KbDiff:
    if not isinstance(doc, dict):
        raise SchemaError("diff document must be a map")
    for f in REQUIRED_FIELDS:
        if f not in doc or doc[f] is None:
            raise SchemaError(f"{f} missing", f)
    extra = set(doc) - set(REQUIRED_FIELDS)
    if extra:
        raise SchemaError(f"unknown field {sorted(extra)[0]!r}", sorted(extra)[0])
    op = doc["op"]
    if op not in OPS:
        raise SchemaError("unknown op", "op")
    for f in ("layer", "key", "path", "metric", "regression_set", "rationale", "expected_effect"):
        if not isinstance(doc[f], str) or not doc[f].strip():
            raise SchemaError(f"{f} missing", f)
    if not isinstance(doc["evidence"], list) or not all(isinstance(x, str) for x in doc["evidence"]):
        raise SchemaError("evidence must be a list of evidence ids", "evidence")
    if not isinstance(doc["payload"], dict):
        raise SchemaError("payload must be a map", "payload")
    _check_payload(op, doc["payload"], doc["path"])
    return KbDiff(
        layer=doc["layer"],
        key=doc["key"],
        op=op,
        path=doc["path"],
        payload=copy.deepcopy(doc["payload"]),
        evidence=tuple(doc["evidence"]),
        metric=doc["metric"],
        regression_set=doc["regression_set"],
        rationale=doc["rationale"],
        expected_effect=doc["expected_effect"],
    )


def parse_diff(text: str) -> KbDiff:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise SchemaError(f"syntax error: {exc}") from None
    return diff_from_dict(doc)


def load_diff(path) -> KbDiff:
    with open(path, encoding="utf-8") as fh:
        return parse_diff(fh.read())


# ---------------------------------------------------------------- planning an edit


class _Reject(Exception):
    def __init__(self, stage: str, reason: str):
        super().__init__(reason)
        self.stage = stage
        self.reason = reason


def _provenance(diff: KbDiff) -> dict:
    return {"kind": "kbdiff", "op": diff.op, "path": diff.path, "evidence": list(diff.evidence), "metric": diff.metric}


def _locate_rule(kb: KnowledgeBase, path: str):
    """Resolve a rule path to (owning entry, rule index or None for top-level)."""
    try:
        loc = resolve_path(kb, path)
    except PathError as exc:
        raise _Reject("path", f"path missing: segment {exc.segment!r}") from None
    if loc.entry_type == "rule" and not loc.inner:
        return kb.find("rule", loc.entry_key), None
    if loc.entry_type == "policy_schema" and len(loc.inner) == 2 and loc.inner[0] == "rules":
        owner = kb.find("policy_schema", loc.entry_key)
        names = [r.get("name") for r in owner.content.get("rules", [])]
        return owner, names.index(loc.inner[1])
    raise _Reject("path", f"path {path!r} does not address a rule")


def _plan(kb: KnowledgeBase, diff: KbDiff) -> tuple[KbEntry | None, KbEntry]:
    """Return (old entry or None, new entry) or raise _Reject."""
    if diff.layer not in _ADMITTED:
        raise _Reject("admission", f"unknown layer {diff.layer!r}")
    if not admitted(diff.layer, diff.op):
        raise _Reject("admission", f"op {diff.op} is not admitted in layer {diff.layer}")
    prov = _provenance(diff)

    if diff.op in ADD_OPS and diff.op != "add_rule":
        pkey, etype = ADD_OPS[diff.op]
        container = LAYOUT[etype][1]
        if diff.path != container:
            try:
                resolve_path(kb, diff.path)
            except PathError as exc:
                raise _Reject("path", f"path missing: segment {exc.segment!r}") from None
            raise _Reject("path", f"{diff.op} must target {container}")
        content = copy.deepcopy(diff.payload[pkey])
        key = content.get("evidence_id" if etype == "experience" else "name")
        if key != diff.key:
            raise _Reject("payload", f"diff key {diff.key!r} does not match payload name {key!r}")
        if kb.get(diff.layer, key) is not None:
            raise _Reject("payload", f"duplicate key {key!r} in layer {diff.layer}")
        if etype == "source_binding":
            fields = (kb.contract or {}).get("observation_fields", {})
            if content.get("field") not in fields:
                raise _Reject("payload", f"binding field {content.get('field')!r} is not a declared observation field")
        if etype == "policy_schema":
            existing = {r.get("name") for o, r, _ in _rules(kb)}
            for r in content.get("rules", []):
                if r.get("name") in existing:
                    raise _Reject("payload", f"duplicate rule name {r.get('name')!r}")
        return None, KbEntry(diff.layer, key, etype, content, (prov,))

    if diff.op == "add_rule":
        rule = copy.deepcopy(diff.payload["rule"])
        if rule.get("name") != diff.key:
            raise _Reject("payload", f"diff key {diff.key!r} does not match payload name {rule.get('name')!r}")
        if "priority" not in rule:
            prios = [r.get("priority", 0) for _, r, _ in _rules(kb)]
            rule["priority"] = (max(prios) if prios else 0) + 10
        names = {r.get("name") for _, r, _ in _rules(kb)}
        if diff.path == "procedural.rules":
            if rule["name"] in names:
                raise _Reject("payload", f"duplicate rule name {rule['name']!r}")
            return None, KbEntry("L4", rule["name"], "rule", rule, (prov,))
        parts = diff.path.split(".")
        if len(parts) == 4 and parts[:2] == ["procedural", "schemas"] and parts[3] == "rules":
            owner = kb.find("policy_schema", parts[2])
            if owner is None:
                raise _Reject("path", f"path missing: segment {parts[2]!r}")
            if rule["name"] in names:
                raise _Reject("payload", f"duplicate rule name {rule['name']!r}")
            content = copy.deepcopy(owner.content)
            content["rules"] = content.get("rules", []) + [rule]
            return owner, KbEntry(owner.layer, owner.key, owner.entry_type, content, owner.provenance + (prov,))
        try:
            resolve_path(kb, diff.path)
        except PathError as exc:
            raise _Reject("path", f"path missing: segment {exc.segment!r}") from None
        raise _Reject("path", "add_rule must target procedural.rules or a schema's rules list")

    if diff.op == "add_object_fact":
        etype = "spatial_prior" if diff.path.startswith("semantic.spatial_priors") else "object_fact"
        container = LAYOUT[etype][1]
        if diff.path not in (container, f"{container}.{diff.payload['class']}"):
            try:
                resolve_path(kb, diff.path)
            except PathError as exc:
                raise _Reject("path", f"path missing: segment {exc.segment!r}") from None
            raise _Reject("path", f"add_object_fact must target {container}")
        cls = diff.payload["class"]
        if cls != diff.key:
            raise _Reject("payload", f"diff key {diff.key!r} does not match class {cls!r}")
        old = kb.find(etype, cls)
        if etype == "spatial_prior":
            if old is not None:
                raise _Reject("payload", f"duplicate spatial prior for {cls!r}")
            return None, KbEntry("L2", cls, etype, copy.deepcopy(diff.payload), (prov,))
        if old is None:
            return None, KbEntry("L2", cls, etype, copy.deepcopy(diff.payload), (prov,))
        clash = set(old.content.get("facts", {})) & set(diff.payload["facts"])
        if clash:
            raise _Reject("payload", f"duplicate fact {sorted(clash)[0]!r} for {cls!r}")
        content = copy.deepcopy(old.content)
        content["facts"] = {**content.get("facts", {}), **copy.deepcopy(diff.payload["facts"])}
        return old, KbEntry(old.layer, old.key, old.entry_type, content, old.provenance + (prov,))

    if diff.op == "modify_threshold":
        try:
            loc = resolve_path(kb, diff.path)
        except PathError as exc:
            raise _Reject("path", f"path missing: segment {exc.segment!r}") from None
        if loc.entry_type not in ("predicate", "grounding_rule") or loc.inner != ("threshold",):
            raise _Reject("path", f"path {diff.path!r} does not address a threshold")
        if loc.layer != diff.layer or loc.entry_key != diff.key:
            raise _Reject("path", f"path {diff.path!r} is not entry {diff.layer}.{diff.key}")
        old = kb.get(loc.layer, loc.entry_key)
        th = old.content["threshold"]
        if loc.layer == "L0" and diff.payload.get("source_field") != old.content.get("source_field"):
            raise _Reject("payload", "grounding threshold edits must declare the entry's source field")
        v = diff.payload["value"]
        if not th["min"] <= v <= th["max"]:
            raise _Reject("payload", f"threshold out of bounds: {v} not in [{th['min']}, {th['max']}]")
        content = copy.deepcopy(old.content)
        content["threshold"]["value"] = v
        return old, KbEntry(old.layer, old.key, old.entry_type, content, old.provenance + (prov,))

    if diff.op in ("modify_rule_guard", "modify_priority"):
        owner, idx = _locate_rule(kb, diff.path)
        rule_name = diff.path.split(".")[-1]
        if rule_name != diff.key:
            raise _Reject("path", f"path {diff.path!r} is not rule {diff.key!r}")
        field_name, value = ("cond", diff.payload["cond"]) if diff.op == "modify_rule_guard" else ("priority", diff.payload["priority"])
        content = copy.deepcopy(owner.content)
        if idx is None:
            content[field_name] = value
        else:
            content["rules"][idx][field_name] = value
        return owner, KbEntry(owner.layer, owner.key, owner.entry_type, content, owner.provenance + (prov,))

    if diff.op == "extend_skill_body":
        try:
            loc = resolve_path(kb, diff.path)
        except PathError as exc:
            raise _Reject("path", f"path missing: segment {exc.segment!r}") from None
        if loc.entry_type != "skill" or loc.inner:
            raise _Reject("path", f"path {diff.path!r} does not address a skill")
        if loc.entry_key != diff.key:
            raise _Reject("path", f"path {diff.path!r} is not skill {diff.key!r}")
        old = kb.find("skill", loc.entry_key)
        clause = diff.payload["clause"]
        if set(clause) != set(old.content.get("params") or []):
            raise _Reject("payload", f"clause binds {sorted(clause)} but skill declares {old.content.get('params')}")
        if clause in old.content.get("body", []):
            raise _Reject("payload", "duplicate skill clause")
        content = copy.deepcopy(old.content)
        content["body"] = content.get("body", []) + [copy.deepcopy(clause)]
        return old, KbEntry(old.layer, old.key, old.entry_type, content, old.provenance + (prov,))

    raise _Reject("admission", f"unknown op {diff.op!r}")  # pragma: no cover


def _rules(kb: KnowledgeBase):
    from .kb import all_rules

    return all_rules(kb)


def _splice(kb: KnowledgeBase, old: KbEntry | None, new: KbEntry) -> KnowledgeBase:
    if old is None:
        entries = kb.entries + (new,)
    else:
        entries = tuple(new if e is old else e for e in kb.entries)
    return kb.replace(entries=entries)


def _snippet(entry: KbEntry | None) -> str:
    return entry.canonical() if entry is not None else "null\n"


def validate_diff(kb: KnowledgeBase, diff: KbDiff) -> CheckResult:
    """All checks of :func:`apply_diff` without producing a KB."""
    try:
        _attempt(kb, diff)
    except _Reject as rej:
        return CheckResult((Diagnostic(diff.path, f"{rej.stage}: {rej.reason}"),))
    return CheckResult()


def _attempt(kb: KnowledgeBase, diff: KbDiff):
    old, new = _plan(kb, diff)
    new_kb = _splice(kb, old, new)
    types = type_check_kb(new_kb)
    if not types.ok:
        raise _Reject("payload", f"schema: {types.diagnostics[0]}")
    refs = resolve_references(new_kb)
    if refs:
        kinds = {"predicate": "unresolved predicate"}
        f = refs[0]
        label = kinds.get(f.kind, f"unresolved {f.kind}")
        if f.detail == "duplicate rule name":
            label = "duplicate rule name"
        raise _Reject("reference", f"{label} {f.ref!r} in {f.layer}.{f.key}" + (f" ({f.detail})" if f.detail and label != f.detail else ""))
    return old, new_kb, new


def apply_diff(kb: KnowledgeBase, diff: KbDiff) -> tuple[KnowledgeBase, ApplyAudit]:
    """Apply one typed edit; raise :class:`DiffRejected` with the audit on any failed check."""
    try:
        old, new_kb, new = _attempt(kb, diff)
    except _Reject as rej:
        audit = ApplyAudit(diff.op, diff.path, diff.rationale, diff.expected_effect, None, None, "apply_failed", rej.reason, rej.stage)
        raise DiffRejected(audit) from None
    audit = ApplyAudit(diff.op, diff.path, diff.rationale, diff.expected_effect, _snippet(old), _snippet(new), "applied")
    return new_kb, audit


def try_apply(kb: KnowledgeBase, diff_or_doc) -> tuple[KnowledgeBase | None, ApplyAudit]:
    """Parse (if needed) and apply; returns ``(None, audit)`` on any rejection."""
    if not isinstance(diff_or_doc, KbDiff):
        try:
            diff = diff_from_dict(diff_or_doc) if isinstance(diff_or_doc, dict) else parse_diff(diff_or_doc)
        except SchemaError as exc:
            d = diff_or_doc if isinstance(diff_or_doc, dict) else {}
            audit = ApplyAudit(str(d.get("op")), str(d.get("path")), str(d.get("rationale")), str(d.get("expected_effect")), None, None, "apply_failed", str(exc), "schema")
            return None, audit
    else:
        diff = diff_or_doc
    try:
        return apply_diff(kb, diff)
    except DiffRejected as rej:
        return None, rej.audit
