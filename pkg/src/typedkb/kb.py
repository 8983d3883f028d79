"""The typed knowledge-base document.

A KB is a versioned set of typed entries ``(layer, key, type, content, provenance)``.
On disk it is a structured document whose sections follow ``LAYOUT``; the
canonical form is sorted-key JSON, which is what hashing and equality use.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable

import yaml

from . import conditions as cx
from .vocab import (
    EXPERIENCE_STATUSES,
    FIELD_PATHS,
    GROUNDING_HANDLERS,
    HELPER_TESTS,
    IDENT,
    LAYERS,
    OBJECT_FACT_KEYS,
    RULE_NAME,
    SELECTORS,
    SEMANTIC_TYPES,
    SKILL_NAME,
    STATE_FIELDS,
)

KB_FORMAT = "typedkb/1"

# entry type -> (layer, container path, container kind)
LAYOUT = {
    "source_contract": ("S0", "source.contracts", "map"),
    "source_binding": ("S0", "source.bindings", "map"),
    "grounding_rule": ("L0", "grounding", "map"),
    "predicate": ("L1", "predicates", "map"),
    "object_fact": ("L2", "semantic.objects", "map"),
    "spatial_prior": ("L2", "semantic.spatial_priors", "map"),
    "operator": ("L3", "operators", "map"),
    "rule": ("L4", "procedural.rules", "list"),
    "skill": ("L4", "procedural.skills", "map"),
    "policy_schema": ("L4", "procedural.schemas", "map"),
    "monitor": ("L5", "monitoring.monitors", "map"),
    "recovery": ("L5", "monitoring.recovery", "map"),
    "experience": ("L6", "experience", "map"),
    "task_schema": ("L7", "goals.task_schemas", "map"),
    "goal_fact": ("L7", "goals.facts", "map"),
}

KEY_FIELD = {"object_fact": "class", "spatial_prior": "class", "experience": "evidence_id"}

CONTAINER_TYPE = {path: etype for etype, (_, path, _) in LAYOUT.items()}


class ParseError(Exception):
    """Raised by :func:`parse_kb`; ``kind`` is one of syntax, schema, dangling-reference."""

    def __init__(self, kind: str, message: str, line: int | None = None, field_path: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field_path:
            loc.append(field_path)
        super().__init__(f"{kind}: {message}" + (f" ({', '.join(loc)})" if loc else ""))
        self.kind = kind
        self.line = line
        self.field_path = field_path


class PathError(KeyError):
    def __init__(self, path: str, segment: str):
        super().__init__(f"{path}: missing segment {segment!r}")
        self.path = path
        self.segment = segment

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class CheckResult:
    diagnostics: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.diagnostics

    def __bool__(self):
        return self.ok

    def messages(self) -> list[str]:
        return [d.message for d in self.diagnostics]


@dataclass(frozen=True)
class Finding:
    layer: str
    key: str
    ref: str
    kind: str
    detail: str = ""

    def __str__(self):
        return f"{self.layer}.{self.key}: unresolved {self.kind} {self.ref!r}" + (f" ({self.detail})" if self.detail else "")


@dataclass(frozen=True)
class KbEntry:
    layer: str
    key: str
    entry_type: str
    content: dict
    provenance: tuple = ()

    @property
    def container(self) -> str:
        return LAYOUT[self.entry_type][1]

    @property
    def address(self) -> str:
        return f"{self.container}.{self.key}"

    def document(self) -> dict:
        doc = copy.deepcopy(self.content)
        doc["provenance"] = [dict(p) for p in self.provenance]
        return doc

    def canonical(self) -> str:
        return _dumps(self.document())


@dataclass(frozen=True)
class KnowledgeBase:
    """Immutable KB value; every change goes through the diff applier and yields a new value."""

    version: int
    entries: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        index: dict = {}
        for e in self.entries:
            index.setdefault((e.layer, e.key), e)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_typed", {(e.entry_type, e.key): e for e in self.entries})

    def get(self, layer: str, key: str) -> KbEntry | None:
        # object facts and spatial priors share L2 keys; the first declared wins here
        return self._index.get((layer, key))

    def of_type(self, entry_type: str) -> list[KbEntry]:
        return [e for e in self.entries if e.entry_type == entry_type]

    def layer(self, layer: str) -> list[KbEntry]:
        return [e for e in self.entries if e.layer == layer]

    def find(self, entry_type: str, key: str) -> KbEntry | None:
        return self._typed.get((entry_type, key))

    @property
    def contract(self) -> dict | None:
        contracts = sorted(self.of_type("source_contract"), key=lambda e: e.key)
        return contracts[0].content if contracts else None

    def keys(self) -> set:
        return set(self._index)

    def to_document(self) -> dict:
        doc: dict[str, Any] = {"kb_format": KB_FORMAT, "version": self.version, "metadata": copy.deepcopy(self.metadata)}
        for etype, (_, path, kind) in LAYOUT.items():
            node = doc
            parts = path.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node.setdefault(parts[-1], [] if kind == "list" else {})
        for e in self.entries:
            _, path, kind = LAYOUT[e.entry_type]
            node = doc
            for part in path.split("."):
                node = node[part]
            if kind == "list":
                node.append(e.document())
            else:
                node[e.key] = e.document()
        return doc

    def replace(self, **changes) -> "KnowledgeBase":
        fields = {"version": self.version, "entries": self.entries, "metadata": self.metadata}
        fields.update(changes)
        return KnowledgeBase(**fields)

    @property
    def hash(self) -> str:
        return canonical_hash(self)

    @property
    def policy_digest(self) -> str:
        """Digest of the executable content only (experience, version and metadata excluded)."""
        doc = self.to_document()
        for k in ("version", "metadata", "experience"):
            doc.pop(k, None)
        return hashlib.sha256(_dumps(doc).encode()).hexdigest()

    @property
    def deployable(self) -> bool:
        return "intervention" not in self.metadata


def _canon(value):
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        return int(value) if value.is_integer() else value
    if isinstance(value, dict):
        return {str(k): _canon(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canon(v) for v in value]
    raise TypeError(f"value of type {type(value).__name__} is not serializable")


def _dumps(doc) -> str:
    return json.dumps(_canon(doc), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def canonical_serialize(kb: KnowledgeBase) -> str:
    return _dumps(kb.to_document())


def canonical_hash(kb: KnowledgeBase) -> str:
    return hashlib.sha256(canonical_serialize(kb).encode()).hexdigest()


def to_yaml(kb: KnowledgeBase) -> str:
    return yaml.safe_dump(_canon(kb.to_document()), sort_keys=True, allow_unicode=True)


# ---------------------------------------------------------------- type checking


class _Checker:
    def __init__(self, base: str):
        self.base = base
        self.diags: list[Diagnostic] = []

    def err(self, sub: str, msg: str):
        path = f"{self.base}.{sub}" if sub else self.base
        self.diags.append(Diagnostic(path, msg))

    def ident(self, content, name, pattern=IDENT, what=None, required=True):
        what = what or name
        value = content.get(name)
        if value is None or value == "":
            if required:
                self.err(name, f"{what} missing")
            return None
        if not isinstance(value, str) or not pattern.match(value):
            self.err(name, f"{what} {value!r} is not a valid identifier")
            return None
        return value

    def text(self, content, name, required=True):
        value = content.get(name)
        if value is None or (isinstance(value, str) and not value.strip()):
            if required:
                self.err(name, f"{name} missing")
            return None
        if not isinstance(value, str):
            self.err(name, f"{name} must be text")
            return None
        return value

    def cond(self, content, name, *, predicates_only: bool, required=True, params=()):
        text = content.get(name)
        if text is None or text == "":
            if required:
                self.err(name, f"{name} missing")
            return None
        if not isinstance(text, str):
            self.err(name, f"{name} must be a condition string")
            return None
        try:
            expr = cx.parse_condition(text)
        except cx.ConditionSyntaxError as exc:
            self.err(name, f"syntax error: {exc}")
            return None
        for node in cx.walk(expr):
            if isinstance(node, cx.Compare):
                if predicates_only:
                    self.err(name, f"guard may only use predicates, found comparison on {node.path!r}")
                    continue
                self._compare(name, node, params)
            elif isinstance(node, cx.PredRef):
                if not predicates_only:
                    self.err(name, f"evaluation rule may not reference predicate {node.name!r}")
                elif not IDENT.match(node.name):
                    self.err(name, f"predicate name {node.name!r} is not a valid identifier")
        return expr

    def _compare(self, name, node: cx.Compare, params):
        if node.path not in FIELD_PATHS:
            self.err(name, f"unknown field path {node.path!r}")
            return
        kind = FIELD_PATHS[node.path][0]
        if node.op in cx.NUMERIC_COMPARATORS and kind != "int":
            self.err(name, f"comparator {node.op} needs a numeric field, {node.path!r} is {kind}")
        if node.op == "contains" and kind != "list":
            self.err(name, f"contains needs a list field, {node.path!r} is {kind}")
        rhs = node.rhs
        if isinstance(rhs, cx.FieldRef) and rhs.path not in FIELD_PATHS:
            self.err(name, f"unknown field path {rhs.path!r}")
        if isinstance(rhs, cx.ParamRef) and rhs.name not in params:
            self.err(name, f"unknown parameter ${rhs.name}")
        if node.op in cx.NUMERIC_COMPARATORS and isinstance(rhs, cx.Literal):
            if isinstance(rhs.value, bool) or not isinstance(rhs.value, (int, float)):
                self.err(name, f"comparator {node.op} needs a numeric literal")
        if node.op == "in" and isinstance(rhs, cx.Literal) and not isinstance(rhs.value, tuple):
            self.err(name, "in needs a list literal")

    def list_of(self, content, name, required=True, nonempty=False):
        value = content.get(name)
        if value is None:
            if required:
                self.err(name, f"{name} missing")
            return None
        if not isinstance(value, list):
            self.err(name, f"{name} must be a list")
            return None
        if nonempty and not value:
            self.err(name, f"{name} must not be empty")
        return value

    def mapping(self, content, name, required=True):
        value = content.get(name)
        if value is None:
            if required:
                self.err(name, f"{name} missing")
            return None
        if not isinstance(value, dict):
            self.err(name, f"{name} must be a map")
            return None
        return value

    def threshold(self, content):
        th = content.get("threshold")
        if th is None:
            return
        if not isinstance(th, dict):
            self.err("threshold", "threshold must be a map with value/min/max")
            return
        vals = {}
        for k in ("value", "min", "max"):
            v = th.get(k)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.err(f"threshold.{k}", f"threshold {k} missing or not numeric")
            else:
                vals[k] = v
        if len(vals) == 3:
            if vals["min"] > vals["max"]:
                self.err("threshold", "threshold bounds inverted")
            elif not vals["min"] <= vals["value"] <= vals["max"]:
                self.err("threshold.value", "threshold out of bounds")

    def unknown(self, content, allowed):
        for k in content:
            if k not in allowed:
                self.err(k, f"unknown field {k!r}")

    def params(self, content, name="params"):
        plist = self.list_of(content, name, required=False)
        names = []
        for i, p in enumerate(plist or []):
            if not isinstance(p, dict):
                self.err(f"{name}[{i}]", "parameter must be a map with name and type")
                continue
            pn = p.get("name")
            if not isinstance(pn, str) or not IDENT.match(pn):
                self.err(f"{name}[{i}].name", "parameter name missing")
            elif pn in names:
                self.err(f"{name}[{i}].name", f"duplicate parameter {pn!r}")
            else:
                names.append(pn)
            if p.get("type") not in SEMANTIC_TYPES:
                self.err(f"{name}[{i}].type", f"semantic type must be one of {SEMANTIC_TYPES}")
        return names


def _key_matches(ck: _Checker, content, key, key_field="name"):
    if key is not None and content.get(key_field) not in (None, "") and content.get(key_field) != key:
        ck.err(key_field, f"{key_field} {content.get(key_field)!r} does not match entry key {key!r}")


def _check_rule_content(ck: _Checker, content: dict, key=None):
    ck.ident(content, "name", RULE_NAME, what="rule name")
    pr = content.get("priority")
    if pr is None:
        ck.err("priority", "priority missing")
    elif isinstance(pr, bool) or not isinstance(pr, int):
        ck.err("priority", "priority must be an integer")
    ck.cond(content, "cond", predicates_only=True)
    ck.ident(content, "action", SKILL_NAME, what="action schema")
    ck.text(content, "rationale")
    ck.text(content, "expected_effect")
    ck.unknown(content, {"name", "priority", "cond", "action", "rationale", "expected_effect"})


def _check_predicate(ck, c, key):
    ck.ident(c, "name", what="predicate name")
    _key_matches(ck, c, key)
    names = ck.params(c)
    ck.threshold(c)
    params = set(names) | ({"threshold"} if isinstance(c.get("threshold"), dict) else set())
    ck.cond(c, "eval_rule", predicates_only=False, params=params)
    ck.unknown(c, {"name", "params", "eval_rule", "threshold", "description"})


def _check_rule(ck, c, key):
    _check_rule_content(ck, c)
    _key_matches(ck, c, key)


def _check_policy_schema(ck, c, key):
    ck.ident(c, "name", what="schema name")
    _key_matches(ck, c, key)
    ck.cond(c, "guard", predicates_only=True, required=False)
    ck.cond(c, "termination", predicates_only=True)
    rules = ck.list_of(c, "rules", nonempty=True)
    for i, r in enumerate(rules or []):
        sub = _Checker(f"{ck.base}.rules[{i}]")
        if not isinstance(r, dict):
            sub.err("", "rule must be a map")
        else:
            _check_rule_content(sub, r)
        ck.diags.extend(sub.diags)
    ck.unknown(c, {"name", "guard", "termination", "rules", "description"})


def _check_skill(ck, c, key):
    ck.ident(c, "name", SKILL_NAME, what="skill name")
    _key_matches(ck, c, key)
    ck.ident(c, "action", what="contract action")
    params = ck.list_of(c, "params")
    if params is not None:
        for i, p in enumerate(params):
            if not isinstance(p, str) or not IDENT.match(p):
                ck.err(f"params[{i}]", "skill parameter must be an identifier")
        if len(set(params)) != len(params):
            ck.err("params", "duplicate skill parameter")
    body = ck.list_of(c, "body", nonempty=True)
    for i, clause in enumerate(body or []):
        if not isinstance(clause, dict):
            ck.err(f"body[{i}]", "clause must map parameters to selectors")
            continue
        if params is not None and set(clause) != set(params):
            ck.err(f"body[{i}]", f"clause binds {sorted(clause)} but skill declares {params}")
        for p, sel in clause.items():
            if sel not in SELECTORS:
                ck.err(f"body[{i}].{p}", f"unknown selector {sel!r}")
    ck.unknown(c, {"name", "action", "params", "body", "description"})


def _check_operator(ck, c, key):
    ck.ident(c, "name", what="operator name")
    _key_matches(ck, c, key)
    names = ck.params(c)
    for i, p in enumerate(ck.list_of(c, "preconditions") or []):
        if not isinstance(p, str):
            ck.err(f"preconditions[{i}]", "precondition must be a predicate reference")
            continue
        try:
            if not isinstance(cx.parse_condition(p), cx.PredRef):
                ck.err(f"preconditions[{i}]", "precondition must be a single predicate reference")
        except cx.ConditionSyntaxError as exc:
            ck.err(f"preconditions[{i}]", f"syntax error: {exc}")
    for i, eff in enumerate(ck.list_of(c, "effects") or []):
        if not isinstance(eff, dict) or not isinstance(eff.get("predicate"), str):
            ck.err(f"effects[{i}]", "effect must name a predicate")
            continue
        if eff.get("sign") not in ("add", "del"):
            ck.err(f"effects[{i}].sign", "effect sign must be add or del")
        try:
            if not isinstance(cx.parse_condition(eff["predicate"]), cx.PredRef):
                ck.err(f"effects[{i}].predicate", "effect must be a single predicate reference")
        except cx.ConditionSyntaxError as exc:
            ck.err(f"effects[{i}].predicate", f"syntax error: {exc}")
    bs = ck.mapping(c, "bound_skill")
    if bs is not None:
        ck.ident(bs, "skill", SKILL_NAME, what="bound_skill.skill")
        args = bs.get("args")
        if not isinstance(args, dict):
            ck.err("bound_skill.args", "bound_skill.args must be a map")
        else:
            for p, v in args.items():
                if v not in names:
                    ck.err(f"bound_skill.args.{p}", f"argument {v!r} is not an operator parameter")
    ck.unknown(c, {"name", "params", "preconditions", "effects", "bound_skill", "description"})


def _check_object_fact(ck, c, key):
    ck.ident(c, "class", what="object class")
    _key_matches(ck, c, key, "class")
    facts = ck.mapping(c, "facts")
    for k, v in (facts or {}).items():
        if k not in OBJECT_FACT_KEYS:
            ck.err(f"facts.{k}", f"unknown fact {k!r}")
        elif not isinstance(v, OBJECT_FACT_KEYS[k]):
            ck.err(f"facts.{k}", f"fact {k} must be {OBJECT_FACT_KEYS[k].__name__}")
    ck.unknown(c, {"class", "facts"})


def _check_spatial_prior(ck, c, key):
    ck.ident(c, "class", what="object class")
    _key_matches(ck, c, key, "class")
    recs = ck.list_of(c, "receptacles", nonempty=True)
    for i, r in enumerate(recs or []):
        if not isinstance(r, str) or not IDENT.match(r):
            ck.err(f"receptacles[{i}]", "receptacle class must be an identifier")
    if recs and len(set(map(str, recs))) != len(recs):
        ck.err("receptacles", "duplicate receptacle class in ranking")
    ck.unknown(c, {"class", "receptacles"})


def _check_monitor(ck, c, key):
    ck.ident(c, "name", what="monitor name")
    _key_matches(ck, c, key)
    ck.cond(c, "trigger", predicates_only=True)
    ck.text(c, "repair_target")
    ck.text(c, "protected_scope")
    ck.unknown(c, {"name", "trigger", "repair_target", "protected_scope", "description"})


def _metric_pair(ck, c, name):
    m = ck.mapping(c, name)
    if m is None:
        return
    for k in ("before", "after"):
        v = m.get(k)
        if not isinstance(v, str) or not v:
            ck.err(f"{name}.{k}", f"{name} metric {k} missing")


def _check_experience(ck, c, key):
    ev = ck.text(c, "evidence_id")
    if ev is not None and key is not None and ev != key:
        ck.err("evidence_id", "evidence_id does not match entry key")
    traj = ck.list_of(c, "trajectories")
    for i, t in enumerate(traj or []):
        if not isinstance(t, str):
            ck.err(f"trajectories[{i}]", "trajectory ref must be text")
    h = ck.mapping(c, "hypothesis")
    if h is not None and not h:
        ck.err("hypothesis", "hypothesis missing")
    _metric_pair(ck, c, "focused")
    _metric_pair(ck, c, "protected")
    st = c.get("status")
    if st in (None, ""):
        ck.err("status", "status missing")
    elif st not in EXPERIENCE_STATUSES:
        ck.err("status", f"status must be one of {EXPERIENCE_STATUSES}")
    ck.unknown(c, {"evidence_id", "trajectories", "hypothesis", "focused", "protected", "status", "note"})


def _check_goal_facts(ck, facts, base):
    for k, v in facts.items():
        if k == "process":
            if v is not None and (not isinstance(v, str) or not IDENT.match(v)):
                ck.err(f"{base}.process", "process must be a verb or null")
        elif k == "light":
            if not isinstance(v, bool):
                ck.err(f"{base}.light", "light must be boolean")
        elif k == "count":
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                ck.err(f"{base}.count", "count must be a positive integer")
        else:
            ck.err(f"{base}.{k}", f"unknown goal fact {k!r}")


def _check_task_schema(ck, c, key):
    ck.ident(c, "name", what="task schema name")
    _key_matches(ck, c, key)
    ck.ident(c, "task_family")
    facts = ck.mapping(c, "facts", required=False)
    if facts:
        _check_goal_facts(ck, facts, "facts")
    steps = ck.list_of(c, "decomposition", nonempty=True)
    for i, s in enumerate(steps or []):
        if not isinstance(s, dict):
            ck.err(f"decomposition[{i}]", "step must be a map with step and ref")
            continue
        ck.ident(s, "step", what=f"decomposition[{i}].step")
        ck.ident(s, "ref", what=f"decomposition[{i}].ref")
    ck.cond(c, "terminal_condition", predicates_only=True)
    ck.unknown(c, {"name", "task_family", "facts", "decomposition", "terminal_condition", "description"})


def _check_goal_fact(ck, c, key):
    ck.ident(c, "name", what="goal fact name")
    _key_matches(ck, c, key)
    ck.ident(c, "task_family")
    fact = c.get("fact")
    if fact not in ("process", "light", "count"):
        ck.err("fact", "fact must be one of process, light, count")
    elif "value" not in c:
        ck.err("value", "value missing")
    else:
        _check_goal_facts(ck, {fact: c["value"]}, "value")
    ck.unknown(c, {"name", "task_family", "fact", "value"})


def _check_source_contract(ck, c, key):
    ck.ident(c, "name", what="source name")
    _key_matches(ck, c, key)
    ck.text(c, "grammar")
    obs = ck.mapping(c, "observation_fields")
    req = ck.list_of(c, "required_fields")
    for r in req or []:
        if obs is not None and r not in obs:
            ck.err("required_fields", f"required field {r!r} is not declared")
    acts = ck.mapping(c, "actions")
    for a, spec in (acts or {}).items():
        if not isinstance(spec, dict) or not isinstance(spec.get("template"), str):
            ck.err(f"actions.{a}", "action needs a template")
            continue
        args = spec.get("args")
        if not isinstance(args, list) or any(t not in SEMANTIC_TYPES for t in args):
            ck.err(f"actions.{a}.args", "action args must be semantic types")
    for name in ("object_classes", "receptacle_classes", "process_verbs", "helpers"):
        ck.list_of(c, name)
    for h in c.get("helpers") or []:
        if h not in HELPER_TESTS:
            ck.err("helpers", f"unknown helper test {h!r}")
    ck.text(c, "success_signal")
    ck.mapping(c, "mutation_surface")
    ck.unknown(
        c,
        {
            "name", "grammar", "observation_fields", "required_fields", "actions", "object_classes",
            "receptacle_classes", "process_verbs", "helpers", "success_signal", "mutation_surface", "description",
        },
    )


def _check_source_binding(ck, c, key):
    ck.ident(c, "name", what="binding name")
    _key_matches(ck, c, key)
    ck.text(c, "field")
    ck.ident(c, "slot")
    if c.get("semantic_type") not in SEMANTIC_TYPES:
        ck.err("semantic_type", f"semantic type must be one of {SEMANTIC_TYPES}")
    ck.unknown(c, {"name", "field", "slot", "semantic_type"})


def _check_grounding_rule(ck, c, key):
    ck.ident(c, "name", what="grounding rule name")
    _key_matches(ck, c, key)
    src = ck.text(c, "source_field")
    tgt = c.get("target_field")
    if tgt not in STATE_FIELDS:
        ck.err("target_field", "target field must be one of the grounded-state fields")
    h = c.get("handler")
    if h not in GROUNDING_HANDLERS:
        ck.err("handler", f"unknown grounding handler {h!r}")
    elif src is not None and GROUNDING_HANDLERS[h] != (src, tgt):
        ck.err("handler", f"handler {h} maps {GROUNDING_HANDLERS[h][0]} -> {GROUNDING_HANDLERS[h][1]}")
    ck.threshold(c)
    ck.unknown(c, {"name", "source_field", "target_field", "handler", "threshold", "description"})


_CHECKERS = {
    "source_contract": _check_source_contract,
    "source_binding": _check_source_binding,
    "grounding_rule": _check_grounding_rule,
    "predicate": _check_predicate,
    "object_fact": _check_object_fact,
    "spatial_prior": _check_spatial_prior,
    "operator": _check_operator,
    "rule": _check_rule,
    "skill": _check_skill,
    "policy_schema": _check_policy_schema,
    "monitor": _check_monitor,
    "recovery": _check_monitor,
    "experience": _check_experience,
    "task_schema": _check_task_schema,
    "goal_fact": _check_goal_fact,
}


def type_check_entry(entry: KbEntry, layer: str, base: str | None = None) -> CheckResult:
    """Schema check of one entry; ``base`` overrides the path prefix used in diagnostics."""
    if base is None:
        base = f"{LAYOUT[entry.entry_type][1]}.{entry.key}" if entry.entry_type in LAYOUT else str(entry.key)
    ck = _Checker(base)
    if layer not in LAYERS:
        ck.err("", f"unknown layer {layer!r}")
    if entry.layer != layer:
        ck.err("", f"entry belongs to {entry.layer}, not {layer}")
    if entry.entry_type not in LAYOUT:
        ck.err("", f"unknown entry type {entry.entry_type!r}")
        return CheckResult(tuple(ck.diags))
    if LAYOUT[entry.entry_type][0] != layer:
        ck.err("", f"entry type {entry.entry_type} is not admitted in layer {layer}")
    if not isinstance(entry.key, str) or not entry.key:
        ck.err("", "entry key missing")
    if not isinstance(entry.content, dict):
        ck.err("", "content must be a map")
        return CheckResult(tuple(ck.diags))
    for i, p in enumerate(entry.provenance):
        if not isinstance(p, dict) or not isinstance(p.get("kind"), str):
            ck.err(f"provenance[{i}]", "provenance record needs a kind")
    _CHECKERS[entry.entry_type](ck, entry.content, entry.key)
    return CheckResult(tuple(ck.diags))


def type_check_kb(kb: KnowledgeBase) -> CheckResult:
    diags: list[Diagnostic] = []
    seen = set()
    for e in kb.entries:
        if (e.entry_type, e.key) in seen:
            diags.append(Diagnostic(e.address, f"duplicate key {e.key!r} in layer {e.layer}"))
        seen.add((e.entry_type, e.key))
        diags.extend(type_check_entry(e, e.layer).diagnostics)
    return CheckResult(tuple(diags))


# ---------------------------------------------------------------- references


def all_rules(kb: KnowledgeBase) -> list[tuple[KbEntry, dict, str | None]]:
    """Every rule in declaration order as (owning entry, rule content, schema guard)."""
    out = []
    for e in kb.of_type("rule"):
        out.append((e, e.content, None))
    for e in sorted(kb.of_type("policy_schema"), key=lambda e: e.key):
        for r in e.content.get("rules", []):
            out.append((e, r, e.content.get("guard")))
    return out


def _safe_parse(text):
    try:
        return cx.parse_condition(text)
    except (cx.ConditionSyntaxError, TypeError):
        return None


def resolve_references(kb: KnowledgeBase) -> list[Finding]:
    """Every identifier that fails to resolve; empty iff the KB is closed."""
    out: list[Finding] = []
    contract = kb.contract
    preds = {e.key: e.content for e in kb.of_type("predicate")}
    skills = {e.key: e.content for e in kb.of_type("skill")}
    operators = {e.key for e in kb.of_type("operator")}
    schemas = {e.key for e in kb.of_type("policy_schema")}
    maintained = {e.content.get("target_field") for e in kb.of_type("grounding_rule")}
    l2_classes = {e.key for e in kb.of_type("object_fact")}
    helpers = set(contract.get("helpers", [])) if contract else set()
    actions = contract.get("actions", {}) if contract else {}
    obs_fields = contract.get("observation_fields", {}) if contract else {}
    verbs = set(contract.get("process_verbs", [])) if contract else set()
    obj_classes = set(contract.get("object_classes", [])) | l2_classes if contract else l2_classes
    rec_classes = set(contract.get("receptacle_classes", [])) | l2_classes if contract else l2_classes

    if contract is None:
        out.append(Finding("S0", "-", "source_contract", "source", "KB declares no source contract"))

    def check_preds(e, expr, allow_helpers=False):
        if expr is None:
            return
        for ref in cx.predicate_refs(expr):
            if allow_helpers and ref.name in helpers and not ref.args:
                continue
            if ref.name not in preds:
                out.append(Finding(e.layer, e.key, ref.name, "predicate"))
                continue
            arity = len(preds[ref.name].get("params") or [])
            if len(ref.args) != arity:
                out.append(Finding(e.layer, e.key, ref.name, "predicate", f"arity {len(ref.args)} != {arity}"))

    rule_names: dict[str, str] = {}
    for e, r, guard in all_rules(kb):
        name = r.get("name")
        if name in rule_names:
            out.append(Finding(e.layer, e.key, name, "rule", "duplicate rule name"))
        rule_names[name] = e.key
        check_preds(e, _safe_parse(r.get("cond")))
        if r.get("action") not in skills:
            out.append(Finding(e.layer, e.key, str(r.get("action")), "skill"))
    for e in kb.of_type("policy_schema"):
        if e.content.get("guard"):
            check_preds(e, _safe_parse(e.content["guard"]))
        check_preds(e, _safe_parse(e.content.get("termination")))

    for e in kb.of_type("skill"):
        act = actions.get(e.content.get("action"))
        if act is None:
            out.append(Finding(e.layer, e.key, str(e.content.get("action")), "action", "not in contract"))
            continue
        params = e.content.get("params") or []
        if len(params) != len(act["args"]):
            out.append(Finding(e.layer, e.key, e.content["action"], "action", f"arity {len(params)} != {len(act['args'])}"))
            continue
        for i, clause in enumerate(e.content.get("body") or []):
            for pos, p in enumerate(params):
                sel = clause.get(p)
                if sel in SELECTORS and SELECTORS[sel] != act["args"][pos]:
                    out.append(Finding(e.layer, e.key, sel, "selector", f"type {SELECTORS[sel]} != {act['args'][pos]}"))

    for e in kb.of_type("operator"):
        for p in e.content.get("preconditions") or []:
            check_preds(e, _safe_parse(p))
        for eff in e.content.get("effects") or []:
            check_preds(e, _safe_parse(eff.get("predicate")))
        bs = e.content.get("bound_skill") or {}
        sk = skills.get(bs.get("skill"))
        if sk is None:
            out.append(Finding(e.layer, e.key, str(bs.get("skill")), "skill"))
            continue
        args = bs.get("args") or {}
        act = actions.get(sk.get("action"))
        want = len(act["args"]) if act else len(sk.get("params") or [])
        if len(args) != want or set(args) != set(sk.get("params") or []):
            out.append(Finding(e.layer, e.key, bs["skill"], "skill", f"arity {len(args)} != {want}"))

    for e in kb.of_type("predicate"):
        expr = _safe_parse(e.content.get("eval_rule"))
        if expr is None:
            continue
        paths = [c.path for c in cx.comparisons(expr)]
        paths += [c.rhs.path for c in cx.comparisons(expr) if isinstance(c.rhs, cx.FieldRef)]
        for path in paths:
            for dep in FIELD_PATHS.get(path, ("", ()))[1]:
                if dep not in maintained:
                    out.append(Finding(e.layer, e.key, dep, "grounding", f"field {path} is not grounded"))

    for e in kb.of_type("grounding_rule"):
        if contract is not None and e.content.get("source_field") not in obs_fields:
            out.append(Finding(e.layer, e.key, str(e.content.get("source_field")), "observation field"))
    for e in kb.of_type("source_binding"):
        if contract is not None and e.content.get("field") not in obs_fields:
            out.append(Finding(e.layer, e.key, str(e.content.get("field")), "observation field"))

    for e in kb.of_type("object_fact"):
        tool = (e.content.get("facts") or {}).get("tool_for")
        if tool is not None and tool not in verbs:
            out.append(Finding(e.layer, e.key, tool, "process verb"))
    for e in kb.of_type("spatial_prior"):
        if e.key not in obj_classes:
            out.append(Finding(e.layer, e.key, e.key, "object class"))
        for r in e.content.get("receptacles") or []:
            if r not in rec_classes:
                out.append(Finding(e.layer, e.key, r, "receptacle class"))

    for e in kb.of_type("monitor") + kb.of_type("recovery"):
        check_preds(e, _safe_parse(e.content.get("trigger")), allow_helpers=True)
        tgt = e.content.get("repair_target")
        if tgt not in skills and tgt not in rule_names:
            out.append(Finding(e.layer, e.key, str(tgt), "repair target"))

    for e in kb.of_type("task_schema"):
        for s in e.content.get("decomposition") or []:
            ref = s.get("ref") if isinstance(s, dict) else None
            if ref not in operators and ref not in schemas:
                out.append(Finding(e.layer, e.key, str(ref), "decomposition step"))
        check_preds(e, _safe_parse(e.content.get("terminal_condition")))
        proc = (e.content.get("facts") or {}).get("process")
        if proc is not None and proc not in verbs:
            out.append(Finding(e.layer, e.key, proc, "process verb"))
    for e in kb.of_type("goal_fact"):
        if e.content.get("fact") == "process" and e.content.get("value") is not None and e.content["value"] not in verbs:
            out.append(Finding(e.layer, e.key, str(e.content["value"]), "process verb"))
    return out


def check_kb(kb: KnowledgeBase) -> tuple[CheckResult, list[Finding]]:
    """Full well-typedness and closure check."""
    return type_check_kb(kb), resolve_references(kb)


def is_well_formed(kb: KnowledgeBase) -> bool:
    types, refs = check_kb(kb)
    return types.ok and not refs


# ---------------------------------------------------------------- parsing


def _entries_from_document(doc: dict) -> list[KbEntry]:
    entries = []
    for etype, (layer, path, kind) in LAYOUT.items():
        node = doc
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                node = None
                break
            node = node[part]
        if node is None:
            continue
        key_field = KEY_FIELD.get(etype, "name")
        if kind == "list":
            if not isinstance(node, list):
                raise ParseError("schema", f"{path} must be a list", field_path=path)
            items = [(item.get(key_field) if isinstance(item, dict) else None, item) for item in node]
        else:
            if not isinstance(node, dict):
                raise ParseError("schema", f"{path} must be a map", field_path=path)
            items = list(node.items())
        for key, item in items:
            if not isinstance(item, dict):
                raise ParseError("schema", "entry must be a map", field_path=f"{path}.{key}")
            if not isinstance(key, str) or not key:
                raise ParseError("schema", "entry key missing", field_path=path)
            content = {k: v for k, v in item.items() if k != "provenance"}
            prov = item.get("provenance") or []
            if not isinstance(prov, list):
                raise ParseError("schema", "provenance must be a list", field_path=f"{path}.{key}.provenance")
            entries.append(KbEntry(layer, key, etype, content, tuple(prov)))
    return entries


_TOP_LEVEL = {"kb_format", "version", "metadata"} | {p.split(".")[0] for _, p, _ in LAYOUT.values()}


def _load_text(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as jexc:
        stripped = text.lstrip()
        if stripped.startswith("{") or stripped.startswith("["):
            raise ParseError("syntax", jexc.msg, line=jexc.lineno) from None
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError("syntax", str(getattr(exc, "problem", exc)), line=mark.line + 1 if mark else None) from None


def kb_from_document(doc) -> KnowledgeBase:
    """Build a KB from a document without checking types or references."""
    if not isinstance(doc, dict):
        raise ParseError("syntax", "document must be a map")
    for k in doc:
        if k not in _TOP_LEVEL:
            raise ParseError("schema", f"unknown section {k!r}", field_path=str(k))
    version = doc.get("version", 0)
    if isinstance(version, bool) or not isinstance(version, int) or version < 0:
        raise ParseError("schema", "version must be a non-negative integer", field_path="version")
    meta = doc.get("metadata") or {}
    if not isinstance(meta, dict):
        raise ParseError("schema", "metadata must be a map", field_path="metadata")
    for etype, (_, path, kind) in LAYOUT.items():
        parts = path.split(".")
        node = doc
        for part in parts[:-1]:
            node = node.get(part) if isinstance(node, dict) else None
        if isinstance(node, dict):
            allowed = {p.split(".")[len(parts) - 1] for _, p, _ in LAYOUT.values() if p.startswith(".".join(parts[:-1]) + ".")}
            if len(parts) > 1:
                for k in node:
                    if k not in allowed:
                        raise ParseError("schema", f"unknown container {k!r}", field_path=".".join(parts[:-1] + [k]))
    entries = _entries_from_document(doc)
    seen = set()
    for e in entries:
        if (e.entry_type, e.key) in seen:
            raise ParseError("schema", f"duplicate key {e.key!r} in layer {e.layer}", field_path=e.address)
        seen.add((e.entry_type, e.key))
    return KnowledgeBase(version=version, entries=tuple(entries), metadata=meta)


def parse_kb(text: str) -> KnowledgeBase:
    """Parse, type-check and resolve a KB document; raise :class:`ParseError` otherwise."""
    doc = _load_text(text)
    if doc is None:
        raise ParseError("syntax", "empty document")
    kb = kb_from_document(doc)
    types = type_check_kb(kb)
    if not types.ok:
        d = types.diagnostics[0]
        raise ParseError("schema", d.message, line=_line_of(text, d.path), field_path=d.path)
    refs = resolve_references(kb)
    if refs:
        f = refs[0]
        raise ParseError("dangling-reference", str(f), line=_line_of(text, f.key), field_path=f"{f.layer}.{f.key}")
    return kb


def _line_of(text: str, path: str) -> int | None:
    needle = path.split(".")[-1].split("[")[0]
    for i, line in enumerate(text.splitlines(), 1):
        if needle and needle in line:
            return i
    return None


def load_kb(path) -> KnowledgeBase:
    with open(path, encoding="utf-8") as fh:
        return parse_kb(fh.read())


def write_kb(kb: KnowledgeBase, path, sidecar: bool = True) -> str:
    """Write the KB (YAML if the name ends in .yaml) and its SHA-256 sidecar; return the hash."""
    path = str(path)
    text = to_yaml(kb) if path.endswith((".yaml", ".yml")) else canonical_serialize(kb)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    digest = canonical_hash(kb)
    if sidecar:
        with open(path + ".sha256", "w", encoding="utf-8") as fh:
            fh.write(digest + "\n")
    return digest


# ---------------------------------------------------------------- addressing


@dataclass(frozen=True)
class NodeLocation:
    path: str
    node: Any
    layer: str | None = None
    entry_key: str | None = None
    entry_type: str | None = None
    inner: tuple = ()


def resolve_path(kb: KnowledgeBase, path: str) -> NodeLocation:
    """Address a container or field of the KB document by dot path.

    List elements are addressed by their ``name`` field.
    """
    if not path:
        raise PathError(path, "")
    doc = kb.to_document()
    node: Any = doc
    segs = path.split(".")
    layer = key = etype = None
    inner: list[str] = []
    walked: list[str] = []
    for seg in segs:
        if isinstance(node, dict) and seg in node:
            node = node[seg]
        elif isinstance(node, list):
            match = [x for x in node if isinstance(x, dict) and x.get("name") == seg]
            if not match:
                raise PathError(path, seg)
            node = match[0]
        else:
            raise PathError(path, seg)
        walked.append(seg)
        prefix = ".".join(walked[:-1])
        if etype is None and prefix in CONTAINER_TYPE:
            etype = CONTAINER_TYPE[prefix]
            layer = LAYOUT[etype][0]
            key = seg
        elif etype is not None:
            inner.append(seg)
    return NodeLocation(path, copy.deepcopy(node), layer, key, etype, tuple(inner))


def entry_from_content(entry_type: str, content: dict, provenance: Iterable = ()) -> KbEntry:
    layer = LAYOUT[entry_type][0]
    key = content.get(KEY_FIELD.get(entry_type, "name"))
    return KbEntry(layer, key, entry_type, copy.deepcopy(content), tuple(provenance))
