"""Deterministic rule executor: observation -> grounded state -> rule -> skill -> command.

Nothing in this module calls an editor.  Every emitted command comes with a
:class:`DecisionTrace` naming the KB entries used to ground, select, monitor,
recover and bind it.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any

from . import conditions as cx
from .household_env import ADAPTERS, DEFAULT_HORIZON, HouseholdEnv, TaskSpec
from .kb import KnowledgeBase, all_rules, kb_from_document

ROLES = ("ground", "select", "monitor", "recover", "bind")
OBJECT_FACT_DEFAULTS = {"process": None, "light": False, "count": 1}


class GroundingError(Exception):
    pass


class ArityError(TypeError):
    pass


class BindError(Exception):
    pass


class DeadEnd(Exception):
    pass


class NoRuleFired(Exception):
    def __init__(self, trace: "DecisionTrace"):
        super().__init__("no rule condition holds")
        self.trace = trace


def class_of(ident: str) -> str:
    return ident.rsplit("_", 1)[0]


def to_text(ident: str) -> str:
    return ident.replace("_", " ")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- grounded state


@dataclass(frozen=True)
class GroundedState:
    goal: dict | None = None
    known_receptacles: tuple = ()
    current_receptacle: str | None = None
    visited: tuple = ()
    open_state: dict = field(default_factory=dict)
    visible_contents: dict = field(default_factory=dict)
    inventory: tuple = ()
    processed_flags: dict = field(default_factory=dict)
    lamp_used_with: tuple = ()
    admissible_commands: tuple = ()
    last_invalid: bool = False
    step_index: int = 0
    unknown_fields: int = 0
    grounded_by: tuple = ()

    __hash__ = None

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("known_receptacles", "visited", "inventory", "lamp_used_with", "admissible_commands", "grounded_by"):
            d[k] = [list(x) if isinstance(x, tuple) else x for x in d[k]]
        d["visible_contents"] = {k: list(v) for k, v in d["visible_contents"].items()}
        d["processed_flags"] = {k: list(v) for k, v in d["processed_flags"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundedState":
        return cls(
            goal=d.get("goal"),
            known_receptacles=tuple(d.get("known_receptacles", ())),
            current_receptacle=d.get("current_receptacle"),
            visited=tuple(d.get("visited", ())),
            open_state=dict(d.get("open_state", {})),
            visible_contents={k: tuple(v) for k, v in d.get("visible_contents", {}).items()},
            inventory=tuple(d.get("inventory", ())),
            processed_flags={k: tuple(v) for k, v in d.get("processed_flags", {}).items()},
            lamp_used_with=tuple(d.get("lamp_used_with", ())),
            admissible_commands=tuple(d.get("admissible_commands", ())),
            last_invalid=d.get("last_invalid", False),
            step_index=d.get("step_index", 0),
            unknown_fields=d.get("unknown_fields", 0),
            grounded_by=tuple(tuple(x) for x in d.get("grounded_by", ())),
        )

    @property
    def digest(self) -> str:
        return _digest(self.to_dict())


# ---------------------------------------------------------------- compiled KB view


def _parse(text):
    if not isinstance(text, str):
        return None
    try:
        return cx.parse_condition(text)
    except cx.ConditionSyntaxError:
        return None


@dataclass
class CompiledRule:
    name: str
    priority: int
    cond: Any
    action: str
    owner: tuple  # (layer, key) of the KB entry holding the rule
    schema: str | None
    order: int


class KbView:
    """Parsed, indexed form of a KB used at run time (built once per KB value)."""

    def __init__(self, kb: KnowledgeBase):
        self.kb = kb
        contracts = sorted(kb.of_type("source_contract"), key=lambda e: e.key)
        self.contract_key = contracts[0].key if contracts else None
        self.contract = contracts[0].content if contracts else None
        self.grounding = sorted(kb.of_type("grounding_rule"), key=lambda e: e.key)
        self.predicates = {}
        for e in kb.of_type("predicate"):
            params = [p["name"] for p in e.content.get("params") or []]
            th = e.content.get("threshold")
            self.predicates[e.key] = (params, _parse(e.content.get("eval_rule")), th.get("value") if isinstance(th, dict) else None)
        self.facts = {e.key: dict(e.content.get("facts") or {}) for e in kb.of_type("object_fact")}
        self.priors = {e.key: list(e.content.get("receptacles") or []) for e in kb.of_type("spatial_prior")}
        self.skills = {e.key: e.content for e in kb.of_type("skill")}
        self.operators = {e.key: e.content for e in kb.of_type("operator")}
        self.skill_operator = {}
        for key in sorted(self.operators):
            sk = (self.operators[key].get("bound_skill") or {}).get("skill")
            self.skill_operator.setdefault(sk, key)
        self.schemas = {}
        for e in kb.of_type("policy_schema"):
            self.schemas[e.key] = (_parse(e.content.get("guard")) if e.content.get("guard") else None, _parse(e.content.get("termination")))
        rules = []
        for i, (owner, r, _) in enumerate(all_rules(kb)):
            schema = owner.key if owner.entry_type == "policy_schema" else None
            rules.append(CompiledRule(r.get("name"), r.get("priority", 0), _parse(r.get("cond")), r.get("action"), (owner.layer, owner.key), schema, i))
        self.rules = sorted(rules, key=lambda r: (-r.priority, r.order))
        self.rule_actions = {r.name: r.action for r in rules}
        self.monitors = [(e.key, _parse(e.content.get("trigger")), e.content.get("repair_target")) for e in sorted(kb.of_type("monitor"), key=lambda e: e.key)]
        self.recoveries = [(e.key, _parse(e.content.get("trigger")), e.content.get("repair_target")) for e in sorted(kb.of_type("recovery"), key=lambda e: e.key)]
        # map containers have no declaration order beyond their sorted keys
        ordered = sorted(kb.of_type("task_schema"), key=lambda e: e.key)
        self.task_schemas = [(i, e.key, e.content, _parse(e.content.get("terminal_condition"))) for i, e in enumerate(ordered)]
        self.goal_facts = sorted(kb.of_type("goal_fact"), key=lambda e: e.key)

    def task_schema(self, family: str | None):
        """Longest task_family prefix match, then declaration order."""
        if not family:
            return None
        best = None
        for order, key, content, term in self.task_schemas:
            fam = content.get("task_family", "")
            if fam and family.startswith(fam):
                rank = (-len(fam), order)
                if best is None or rank < best[0]:
                    best = (rank, key, content, term)
        return None if best is None else best[1:]


def compile_kb(kb: KnowledgeBase) -> KbView:
    view = kb.__dict__.get("_view")
    if view is None:
        view = KbView(kb)
        object.__setattr__(kb, "_view", view)
    return view


# ---------------------------------------------------------------- grounding


def _initial_fields() -> dict:
    return {
        "goal": None,
        "known_receptacles": [],
        "current_receptacle": None,
        "visited": set(),
        "open_state": {},
        "visible_contents": {},
        "inventory": [],
        "processed_flags": {},
        "lamp_used_with": [],
        "admissible_commands": [],
        "last_invalid": False,
    }


def _apply_handler(handler: str, value, st: dict, limit=None):
    if handler == "set_goal":
        st["goal"] = dict(value)
    elif handler == "set_known":
        st["known_receptacles"] = list(value)
    elif handler == "set_location":
        st["current_receptacle"] = value
    elif handler == "mark_visited":
        st["visited"].add(value)
    elif handler == "set_open_state":
        st["open_state"][value["receptacle"]] = value["state"]
    elif handler == "set_contents":
        items = list(value["items"])
        st["visible_contents"][value["receptacle"]] = items if limit is None else items[: int(limit)]
    elif handler == "pickup":
        items = st["visible_contents"].get(value["receptacle"], [])
        st["visible_contents"][value["receptacle"]] = [o for o in items if o != value["object"]]
        st["inventory"] = st["inventory"] + [value["object"]]
    elif handler == "place":
        st["inventory"] = [o for o in st["inventory"] if o != value["object"]]
        st["visible_contents"][value["receptacle"]] = st["visible_contents"].get(value["receptacle"], []) + [value["object"]]
    elif handler == "mark_opened":
        st["open_state"][value] = "open"
    elif handler == "mark_closed":
        st["open_state"][value] = "closed"
    elif handler == "mark_processed":
        flags = st["processed_flags"].get(value["object"], [])
        if value["verb"] not in flags:
            st["processed_flags"][value["object"]] = sorted(flags + [value["verb"]])
    elif handler == "mark_lamp":
        st["lamp_used_with"] = sorted(set(st["lamp_used_with"]) | set(st["inventory"]))
    elif handler == "set_inventory":
        st["inventory"] = list(value)
    elif handler == "set_admissible":
        st["admissible_commands"] = list(value)
    elif handler == "set_invalid":
        st["last_invalid"] = bool(value)


def ground(observation: dict, kb: KnowledgeBase, prev: GroundedState | None = None, step_index: int | None = None) -> GroundedState:
    """Apply the KB's grounding rules to one raw observation ``{"text", "admissible"}``."""
    view = compile_kb(kb)
    contract = view.contract
    if contract is None:
        raise GroundingError("KB declares no source contract")
    for f in contract.get("required_fields", []):
        if f not in observation:
            raise GroundingError(f"required observation field {f!r} is absent")
    adapter = ADAPTERS.get(contract.get("grammar"))
    if adapter is None:
        raise GroundingError(f"no observation adapter for grammar {contract.get('grammar')!r}")
    declared = contract.get("observation_fields") or {}
    parsed = adapter(observation)
    fields = {k: v for k, v in parsed.items() if k in declared}

    if prev is None:
        st = _initial_fields()
    else:
        st = {
            "goal": prev.goal,
            "known_receptacles": list(prev.known_receptacles),
            "current_receptacle": prev.current_receptacle,
            "visited": set(prev.visited),
            "open_state": dict(prev.open_state),
            "visible_contents": {k: list(v) for k, v in prev.visible_contents.items()},
            "inventory": list(prev.inventory),
            "processed_flags": {k: list(v) for k, v in prev.processed_flags.items()},
            "lamp_used_with": list(prev.lamp_used_with),
            "admissible_commands": list(prev.admissible_commands),
            "last_invalid": prev.last_invalid,
        }
    used = [("S0", view.contract_key)]
    consumed = {"text"}
    for rule in view.grounding:
        src = rule.content.get("source_field")
        if src in fields:
            th = rule.content.get("threshold")
            _apply_handler(rule.content.get("handler"), fields[src], st, th.get("value") if isinstance(th, dict) else None)
            used.append(("L0", rule.key))
            consumed.add(src)
    unknown = (prev.unknown_fields if prev else 0) + sum(1 for k in parsed if k not in consumed)
    return GroundedState(
        goal=st["goal"],
        known_receptacles=tuple(st["known_receptacles"]),
        current_receptacle=st["current_receptacle"],
        visited=tuple(sorted(st["visited"])),
        open_state=st["open_state"],
        visible_contents={k: tuple(v) for k, v in st["visible_contents"].items()},
        inventory=tuple(st["inventory"]),
        processed_flags={k: tuple(v) for k, v in st["processed_flags"].items()},
        lamp_used_with=tuple(st["lamp_used_with"]),
        admissible_commands=tuple(st["admissible_commands"]),
        last_invalid=st["last_invalid"],
        step_index=step_index if step_index is not None else (prev.step_index + 1 if prev else 0),
        unknown_fields=unknown,
        grounded_by=tuple(used),
    )


# ---------------------------------------------------------------- field evaluation


class FieldContext:
    """Field-path values of one grounded state under one KB; records L2/L7 entries consulted."""

    def __init__(self, view: KbView, state: GroundedState):
        self.view = view
        self.state = state
        self.used: set = set()
        self._cache: dict = {}
        self._goal = None

    # -- KB lookups
    def fact(self, cls: str, name: str):
        facts = self.view.facts.get(cls)
        if facts is None:
            return None
        self.used.add(("L2", cls))
        return facts.get(name)

    def prior(self, cls: str) -> list:
        p = self.view.priors.get(cls)
        if p is None:
            return []
        self.used.add(("L2", cls))
        return p

    def goal(self) -> dict:
        if self._goal is None:
            raw = self.state.goal or {}
            g = {"family": raw.get("family"), "target": raw.get("target"), "recep": raw.get("recep")}
            g.update(OBJECT_FACT_DEFAULTS)
            schema = self.view.task_schema(g["family"])
            if schema is not None:
                key, content, _ = schema
                self.used.add(("L7", key))
                g.update({k: v for k, v in (content.get("facts") or {}).items() if k in OBJECT_FACT_DEFAULTS})
            for e in self.view.goal_facts:
                fam = e.content.get("task_family", "")
                if g["family"] and g["family"].startswith(fam):
                    self.used.add(("L7", e.key))
                    g[e.content["fact"]] = e.content.get("value")
            g["deposit"] = g["recep"] is not None
            self._goal = g
        return self._goal

    # -- derived sets
    def is_target(self, obj: str) -> bool:
        t = self.goal()["target"]
        return t is not None and class_of(obj) == t

    def is_lamp(self, obj: str) -> bool:
        return bool(self.fact(class_of(obj), "light_source"))

    def processed_ok(self, obj: str) -> bool:
        verb = self.goal()["process"]
        return verb is None or verb in self.state.processed_flags.get(obj, ())

    def deposited(self, obj: str, rid: str) -> bool:
        g = self.goal()
        return g["deposit"] and class_of(rid) == g["recep"] and self.processed_ok(obj)

    def targets_at(self, rid: str | None) -> list[str]:
        if rid is None:
            return []
        return [o for o in self.state.visible_contents.get(rid, ()) if self.is_target(o) and not self.deposited(o, rid)]

    def lamps_at(self, rid: str | None) -> list[str]:
        if rid is None:
            return []
        return [o for o in self.state.visible_contents.get(rid, ()) if self.is_lamp(o)]

    def known_index(self, rid: str) -> int:
        known = self.state.known_receptacles
        return known.index(rid) if rid in known else len(known)

    def tool_for(self, rid: str | None):
        return None if rid is None else self.fact(class_of(rid), "tool_for")

    def value(self, path: str):
        if path not in self._cache:
            self._cache[path] = self._compute(path)
        return self._cache[path]

    def _compute(self, path: str):
        s = self.state
        cur = s.current_receptacle
        if path == "current.receptacle":
            return cur
        if path == "current.class":
            return class_of(cur) if cur else None
        if path == "current.open_state":
            return s.open_state.get(cur) if cur else None
        if path == "current.tool_for":
            return self.tool_for(cur)
        if path == "current.content_classes":
            return [class_of(o) for o in s.visible_contents.get(cur, ())] if cur else []
        if path == "current.targets":
            return len(self.targets_at(cur))
        if path == "current.unprocessed_targets":
            verb = self.goal()["process"]
            if verb is None:
                return 0
            return sum(1 for o in self.targets_at(cur) if verb not in s.processed_flags.get(o, ()))
        if path == "current.processed_targets":
            verb = self.goal()["process"]
            if verb is None:
                return 0
            return sum(1 for o in self.targets_at(cur) if verb in s.processed_flags.get(o, ()))
        if path == "current.lamps":
            return len(self.lamps_at(cur))
        if path == "inventory.count":
            return len(s.inventory)
        if path == "held.class":
            return class_of(s.inventory[0]) if s.inventory else None
        if path == "held.is_target":
            return bool(s.inventory) and self.is_target(s.inventory[0])
        if path == "held.processed":
            return list(s.processed_flags.get(s.inventory[0], ())) if s.inventory else []
        if path.startswith("goal."):
            g = self.goal()
            name = path[5:]
            if name == "deposited":
                return sum(
                    1
                    for r, items in s.visible_contents.items()
                    for o in items
                    if self.is_target(o) and self.deposited(o, r)
                )
            return g.get(name)
        if path == "known.target_locations":
            return sum(1 for r in s.visible_contents if r != cur and self.targets_at(r))
        if path == "known.lamp_locations":
            return sum(1 for r in s.visible_contents if self.lamps_at(r))
        if path == "known.tool_locations":
            verb = self.goal()["process"]
            if verb is None:
                return 0
            return sum(1 for r in s.known_receptacles if self.tool_for(r) == verb)
        if path == "unvisited.count":
            return sum(1 for r in s.known_receptacles if r not in s.visited)
        if path == "visited.count":
            return len(s.visited)
        if path == "step.index":
            return s.step_index
        if path == "last.invalid":
            return s.last_invalid
        if path == "lamp.used_with_target":
            return any(self.is_target(o) for o in s.lamp_used_with)
        raise KeyError(path)


# ---------------------------------------------------------------- predicates


class Evaluator:
    """Evaluates predicates and conditions for one decision step, memoising results."""

    def __init__(self, view: KbView, state: GroundedState, helpers: dict | None = None):
        self.view = view
        self.ctx = FieldContext(view, state)
        self.helpers = dict(helpers or {})
        self.results: dict = {}
        self.log: list = []

    def predicate(self, ref: cx.PredRef) -> bool:
        key = (ref.name, ref.args)
        if key in self.results:
            self.log.append(key)
            return self.results[key]
        if ref.name in self.helpers and not ref.args:
            value = bool(self.helpers[ref.name])
        elif ref.name not in self.view.predicates:
            value = False
        else:
            params, expr, threshold = self.view.predicates[ref.name]
            if len(ref.args) != len(params):
                raise ArityError(f"{ref.name} expects {len(params)} arguments, got {len(ref.args)}")
            bound = dict(zip(params, ref.args))
            if threshold is not None:
                bound["threshold"] = threshold
            value = False if expr is None else cx.evaluate(expr, predicate=lambda r: False, field=self.ctx.value, params=bound)
        self.results[key] = value
        self.log.append(key)
        return value

    def cond(self, expr) -> bool:
        if expr is None:
            return False
        return cx.evaluate(expr, predicate=self.predicate, field=self.ctx.value)

    def take_log(self) -> list:
        out, self.log = self.log, []
        return out


def eval_predicate(defn: dict, state: GroundedState, args=(), kb: KnowledgeBase | None = None) -> bool:
    """Evaluate one predicate definition on a state; ``kb`` supplies ontology and goal facts."""
    params = [p["name"] for p in defn.get("params") or []]
    if len(args) != len(params):
        raise ArityError(f"{defn.get('name')} expects {len(params)} arguments, got {len(args)}")
    view = compile_kb(kb) if kb is not None else KbView(KnowledgeBase(0, ()))
    ctx = FieldContext(view, state)
    bound = dict(zip(params, args))
    th = defn.get("threshold")
    if isinstance(th, dict):
        bound["threshold"] = th.get("value")
    expr = cx.parse_condition(defn["eval_rule"])
    return cx.evaluate(expr, predicate=lambda r: False, field=ctx.value, params=bound)


# ---------------------------------------------------------------- traces


@dataclass
class DecisionTrace:
    step_index: int
    entries_used: dict = field(default_factory=lambda: {r: [] for r in ROLES})
    fired_rule: str = "fallback"
    emitted_command: str | None = None
    predicates: list = field(default_factory=list)
    rules_failed: list = field(default_factory=list)
    skill: str | None = None
    operator: str | None = None
    schema: str | None = None
    monitor: str | None = None
    recovery: str | None = None

    def use(self, role: str, layer: str, key: str):
        pair = [layer, key]
        if pair not in self.entries_used[role]:
            self.entries_used[role].append(pair)

    def log_predicates(self, keys):
        for name, args in keys:
            label = name if not args else f"{name}({', '.join(map(str, args))})"
            if label not in (p[0] for p in self.predicates):
                self.predicates.append([label, None])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entries_used"] = {r: sorted(v) for r, v in self.entries_used.items()}
        return d

    def all_entries(self) -> set:
        return {tuple(p) for v in self.entries_used.values() for p in v}


def _record_preds(trace: DecisionTrace, ev: Evaluator, role: str):
    keys = ev.take_log()
    for name, args in keys:
        label = name if not args else f"{name}({', '.join(map(str, args))})"
        if label not in (p[0] for p in trace.predicates):
            trace.predicates.append([label, ev.results[(name, args)]])
        if name in ev.view.predicates:
            trace.use(role, "L1", name)


def _flush_ctx(trace: DecisionTrace, ev: Evaluator, role: str):
    for layer, key in sorted(ev.ctx.used):
        trace.use(role, layer, key)
    ev.ctx.used.clear()


def _active_schema(view: KbView, ev: Evaluator, trace: DecisionTrace):
    g = ev.ctx.goal()
    sel = view.task_schema(g["family"])
    if sel is not None:
        trace.use("select", "L7", sel[0])
    return sel


def _select(view: KbView, ev: Evaluator, trace: DecisionTrace) -> CompiledRule | None:
    schema_state = {}
    for key, (guard, term) in sorted(view.schemas.items()):
        active = True
        if guard is not None and not ev.cond(guard):
            active = False
        if active and term is not None and ev.cond(term):
            active = False
        schema_state[key] = active
        trace.use("select", "L4", key)
    _record_preds(trace, ev, "select")
    for rule in view.rules:
        if rule.schema is not None and not schema_state.get(rule.schema, False):
            continue
        ok = ev.cond(rule.cond)
        _record_preds(trace, ev, "select")
        trace.use("select", *rule.owner)
        if ok:
            trace.fired_rule = rule.name
            trace.schema = rule.schema
            _flush_ctx(trace, ev, "select")
            return rule
        trace.rules_failed.append(rule.name)
    _flush_ctx(trace, ev, "select")
    return None


def select_action(kb: KnowledgeBase, state: GroundedState, goal=None) -> tuple[str, DecisionTrace]:
    """First satisfied rule by descending priority, declaration order breaking ties."""
    view = compile_kb(kb)
    ev = Evaluator(view, state)
    trace = DecisionTrace(state.step_index)
    _active_schema(view, ev, trace)
    rule = _select(view, ev, trace)
    if rule is None:
        raise NoRuleFired(trace)
    return rule.action, trace


# ---------------------------------------------------------------- binding


def _selector_values(sel: str, ctx: FieldContext) -> list[str]:
    s = ctx.state
    cur = s.current_receptacle
    g = ctx.goal()
    if sel == "next_unvisited":
        unvisited = [r for r in s.known_receptacles if r not in s.visited]
        search = g["target"]
        if g["light"] and s.inventory and ctx.is_target(s.inventory[0]):
            lamps = [c for c, f in sorted(ctx.view.facts.items()) if f.get("light_source")]
            search = lamps[0] if lamps else search
        prior = ctx.prior(search) if search else []
        rank = {c: i for i, c in enumerate(prior)}
        return sorted(unvisited, key=lambda r: (rank.get(class_of(r), len(rank)), ctx.known_index(r)))
    if sel == "goal_recep":
        return [r for r in s.known_receptacles if g["recep"] and class_of(r) == g["recep"]]
    if sel == "process_tool":
        return [r for r in s.known_receptacles if g["process"] and ctx.tool_for(r) == g["process"]]
    if sel == "lamp_location":
        return sorted((r for r in s.visible_contents if ctx.lamps_at(r)), key=ctx.known_index)
    if sel == "known_target":
        return sorted((r for r in s.visible_contents if r != cur and ctx.targets_at(r)), key=ctx.known_index)
    if sel == "current":
        return [cur] if cur else []
    if sel == "current_tool":
        return [cur] if cur and ctx.tool_for(cur) else []
    if sel == "held":
        return list(s.inventory)
    if sel == "target_here":
        objs = ctx.targets_at(cur)
        return sorted(objs, key=lambda o: (not ctx.processed_ok(o), o))
    if sel == "unprocessed_target_here":
        verb = g["process"]
        return [o for o in ctx.targets_at(cur) if verb and verb not in s.processed_flags.get(o, ())]
    if sel == "lamp_here":
        return ctx.lamps_at(cur)
    if sel == "process_verb":
        return [g["process"]] if g["process"] else []
    raise BindError(f"unknown selector {sel!r}")


def bind_candidates(action_schema: str, state: GroundedState, kb: KnowledgeBase, ctx: FieldContext | None = None) -> list[str]:
    """All grounded commands the skill can produce, in preference order."""
    view = compile_kb(kb)
    skill = view.skills.get(action_schema)
    if skill is None:
        raise BindError(f"action schema {action_schema!r} has no skill binding")
    contract = view.contract or {}
    action = (contract.get("actions") or {}).get(skill.get("action"))
    if action is None:
        raise BindError(f"skill {action_schema} names unknown action {skill.get('action')!r}")
    params = skill.get("params") or []
    ctx = ctx or FieldContext(view, state)
    out: list[str] = []
    for clause in skill.get("body") or []:
        lists = [_selector_values(clause[p], ctx) for p in params]
        for combo in itertools.product(*lists):
            cmd = action["template"].format(*[to_text(a) for a in combo])
            if cmd not in out:
                out.append(cmd)
    return out


def bind_skill(action_schema: str, state: GroundedState, kb: KnowledgeBase) -> str:
    cands = bind_candidates(action_schema, state, kb)
    if not cands:
        raise BindError(f"{action_schema}: no grounding for required arguments")
    return cands[0]


# ---------------------------------------------------------------- policy step


def terminal_reached(kb: KnowledgeBase, state: GroundedState) -> bool:
    view = compile_kb(kb)
    ev = Evaluator(view, state)
    sel = view.task_schema(ev.ctx.goal()["family"])
    if sel is None or sel[2] is None:
        return False
    return ev.cond(sel[2])


@dataclass
class StepOutcome:
    command: str
    trace: DecisionTrace
    primary_admissible: bool
    recovered: bool


def step_policy(kb: KnowledgeBase, state: GroundedState, goal=None, tried: set | None = None) -> tuple[str, DecisionTrace]:
    out = policy_step(kb, state, tried)
    return out.command, out.trace


def policy_step(kb: KnowledgeBase, state: GroundedState, tried: set | None = None) -> StepOutcome:
    """One decision with monitor pre-emption and the admissible-command fallback.

    Fallback order: next bind candidate, the recovery repair skill, the first
    admissible command not yet tried, then :class:`DeadEnd`.
    """
    view = compile_kb(kb)
    tried = set(tried or ())
    ev = Evaluator(view, state)
    trace = DecisionTrace(state.step_index)
    for layer, key in state.grounded_by:
        if layer == "S0" or view.kb.get(layer, key) is not None:
            trace.use("ground", layer, key)
    _active_schema(view, ev, trace)
    _flush_ctx(trace, ev, "select")

    action = None
    for key, trigger, repair in view.monitors:
        trace.use("monitor", "L5", key)
        fired = ev.cond(trigger)
        _record_preds(trace, ev, "monitor")
        _flush_ctx(trace, ev, "monitor")
        if fired and action is None:
            action = repair if repair in view.skills else view.rule_actions.get(repair)
            trace.monitor = key
            trace.fired_rule = f"monitor:{key}"

    if action is None:
        rule = _select(view, ev, trace)
        action = rule.action if rule else None

    candidates: list[str] = []
    bind_ok = False
    if action is not None:
        try:
            candidates = bind_candidates(action, state, kb, ev.ctx)
            bind_ok = bool(candidates)
        except BindError:
            candidates = []
        _flush_ctx(trace, ev, "bind")
        if action in view.skills:
            trace.use("bind", "L4", action)
            trace.skill = action
            op = view.skill_operator.get(action)
            if op is not None:
                trace.use("bind", "L3", op)
                trace.operator = op
    admissible = set(state.admissible_commands)
    primary = candidates[0] if candidates else None
    primary_ok = primary is not None and primary in admissible
    if primary_ok:
        trace.emitted_command = primary
        return StepOutcome(primary, trace, True, False)

    helpers = {"rule_fired": action is not None, "bind_ok": bind_ok, "command_admissible": primary_ok}
    recovery = None
    hev = Evaluator(view, state, helpers)
    for key, trigger, repair in view.recoveries:
        trace.use("recover", "L5", key)
        if hev.cond(trigger):
            recovery = (key, repair)
            break
    _record_preds(trace, hev, "recover")
    if recovery is None:
        if primary is None:
            raise DeadEnd(f"step {state.step_index}: no rule fired or no binding, and no recovery entry")
        trace.emitted_command = primary
        return StepOutcome(primary, trace, False, False)

    trace.recovery = recovery[0]
    tried.update(c for c in candidates[:1])
    for c in candidates[1:]:
        if c in admissible and c not in tried:
            trace.emitted_command = c
            trace.recovery = f"{recovery[0]}:next_candidate"
            return StepOutcome(c, trace, primary is None, True)
    repair_cmds = []
    if recovery[1] in view.skills:
        try:
            repair_cmds = bind_candidates(recovery[1], state, kb)
        except BindError:
            repair_cmds = []
        trace.use("recover", "L4", recovery[1])
    for c in repair_cmds:
        if c in admissible and c not in tried:
            trace.emitted_command = c
            trace.recovery = f"{recovery[0]}:repair"
            return StepOutcome(c, trace, primary is None, True)
    for c in sorted(admissible):
        if c not in tried:
            trace.emitted_command = c
            trace.recovery = f"{recovery[0]}:first_admissible"
            return StepOutcome(c, trace, primary is None, True)
    raise DeadEnd(f"step {state.step_index}: no admissible command remains")


# ---------------------------------------------------------------- episodes


@dataclass
class TrajectoryRecord:
    task_id: str
    family: str
    goal: str
    schema: str | None
    plan: list
    steps: list
    success: bool
    step_count: int
    invalid_action_count: int
    recovery_count: int
    final_state: dict | None
    ended: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        return cls(**d)


def run_episode(kb: KnowledgeBase, env: HouseholdEnv, task: TaskSpec, horizon: int = DEFAULT_HORIZON) -> TrajectoryRecord:
    view = compile_kb(kb)
    text = env.reset()
    goal_sentence = text.split(". You see")[0] + "."
    steps: list = []
    invalid = recoveries = 0
    ended = "horizon"
    state = None
    schema = None
    plan: list = []
    try:
        state = ground(env.observe(text), kb, None, 0)
        sel = view.task_schema((state.goal or {}).get("family"))
        if sel is not None:
            schema = sel[0]
            plan = [s.get("ref") for s in sel[1].get("decomposition") or [] if isinstance(s, dict)]
        for t in range(horizon):
            if terminal_reached(kb, state):
                ended = "terminal"
                break
            out = policy_step(kb, state)
            if not out.primary_admissible:
                invalid += 1
            if out.recovered or out.trace.monitor:
                recoveries += 1
            res = env.step(out.command)
            steps.append(
                {
                    "t": t,
                    "obs": _digest([text, list(state.admissible_commands)]),
                    "state": state.to_dict(),
                    "state_digest": state.digest,
                    "trace": out.trace.to_dict(),
                    "command": out.command,
                    "response": res.observation,
                    "admissible": res.admissible,
                }
            )
            text = res.observation
            state = ground(env.observe(text), kb, state, t + 1)
            if res.success:
                ended = "success"
                break
    except DeadEnd:
        ended = "dead_end"
    except GroundingError:
        ended = "grounding_error"
    return TrajectoryRecord(
        task_id=task.task_id,
        family=task.family,
        goal=goal_sentence,
        schema=schema,
        plan=plan,
        steps=steps,
        success=env.success(),
        step_count=len(steps),
        invalid_action_count=invalid,
        recovery_count=recoveries,
        final_state=state.to_dict() if state is not None else None,
        ended=ended,
    )


def _run_one(args):
    kb_doc, task_dict, horizon = args
    kb = kb_from_document(kb_doc)
    task = TaskSpec.from_dict(task_dict)
    return run_episode(kb, HouseholdEnv(task), task, horizon).to_dict()


def run_tasks(kb: KnowledgeBase, tasks, horizon: int = DEFAULT_HORIZON, jobs: int = 1) -> list[TrajectoryRecord]:
    """Run every task; results come back in task order whatever ``jobs`` is."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [run_episode(kb, HouseholdEnv(t), t, horizon) for t in tasks]
    doc = kb.to_document()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_run_one, [(doc, t.to_dict(), horizon) for t in tasks]))
    return [TrajectoryRecord.from_dict(r) for r in results]


def trace_contained(record: TrajectoryRecord | dict, kb: KnowledgeBase) -> list[tuple]:
    """(step, layer, key) for every trace entry that is not a key of ``kb``."""
    d = record if isinstance(record, dict) else record.to_dict()
    keys = kb.keys()
    bad = []
    for step in d["steps"]:
        for role, pairs in step["trace"]["entries_used"].items():
            for layer, key in pairs:
                if (layer, key) not in keys:
                    bad.append((step["t"], layer, key))
    return bad


def first_match_violations(record: TrajectoryRecord | dict, kb: KnowledgeBase) -> list[int]:
    """Steps whose fired rule is not the maximal satisfied rule when re-evaluated offline."""
    d = record if isinstance(record, dict) else record.to_dict()
    view = compile_kb(kb)
    bad = []
    for step in d["steps"]:
        tr = step["trace"]
        if tr.get("monitor"):
            continue
        state = GroundedState.from_dict(step["state"])
        ev = Evaluator(view, state)
        scratch = DecisionTrace(state.step_index)
        rule = _select(view, ev, scratch)
        expected = rule.name if rule else "fallback"
        if expected != tr["fired_rule"]:
            bad.append(step["t"])
    return bad


def with_admissible(state: GroundedState, commands) -> GroundedState:
    return replace(state, admissible_commands=tuple(commands))
