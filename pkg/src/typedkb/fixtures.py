"""Builders for the shipped KB and diff fixtures.

The JSON files under ``typedkb/data`` are generated from these functions by
``scripts/make_fixtures.py``; a test checks they stay in sync.
"""

from __future__ import annotations

import copy
import json
from importlib import resources

from .household_env import LAMP_CLASS, PORTABLE, RECEPTACLE_CLASSES, interface_contract
from .kb import KbEntry, KnowledgeBase, entry_from_content, kb_from_document, parse_kb

SEED_PROVENANCE = ({"kind": "seed", "source": "scaffold"},)


def _e(entry_type: str, content: dict) -> KbEntry:
    return entry_from_content(entry_type, content, SEED_PROVENANCE)


GROUNDING = [
    ("goal_from_text", "goal", "goal", "set_goal"),
    ("room_listing", "room_receptacles", "known_receptacles", "set_known"),
    ("location", "location", "current_receptacle", "set_location"),
    ("visit_log", "location", "visited", "mark_visited"),
    ("open_state", "location_state", "open_state", "set_open_state"),
    ("contents", "location_contents", "visible_contents", "set_contents"),
    ("pickup", "picked", "inventory", "pickup"),
    ("place", "placed", "inventory", "place"),
    ("opened", "opened", "open_state", "mark_opened"),
    ("closed", "closed", "open_state", "mark_closed"),
    ("processed", "processed", "processed_flags", "mark_processed"),
    ("lamp_use", "lamp_on", "lamp_used_with", "mark_lamp"),
    ("carrying", "carrying", "inventory", "set_inventory"),
    ("admissible", "admissible", "admissible_commands", "set_admissible"),
    ("invalid", "invalid", "last_invalid", "set_invalid"),
]

PREDICATES = [
    ("always", [], "step.index >= 0", None),
    ("holds_target", [], "held.is_target = true", None),
    ("hand_empty", [], "inventory.count = 0", None),
    ("task_uses_deposit", [], "goal.deposit = true", None),
    ("task_uses_light", [], "goal.light = true", None),
    ("task_needs_process", [], "goal.process != none", None),
    ("held_processed", [], "all(goal.process != none, held.processed contains @goal.process)", None),
    ("ready_to_deposit", [], "all(held.is_target = true, any(goal.process = none, held.processed contains @goal.process))", None),
    ("at_goal_recep", [], "all(goal.recep != none, current.class = @goal.recep)", None),
    ("current_openable_closed", [], "current.open_state = closed", None),
    ("current_accessible", [], "current.open_state in [open, not_openable]", None),
    ("target_here", [], "current.targets >= 1", None),
    ("unprocessed_target_here", [], "current.unprocessed_targets >= 1", None),
    ("processed_target_here", [], "current.processed_targets >= 1", None),
    ("target_known_elsewhere", [], "known.target_locations >= 1", None),
    ("has_unvisited", [], "unvisited.count >= $threshold", {"value": 1, "min": 1, "max": 8}),
    ("at_process_tool", [("verb", "none")], "current.tool_for = $verb", None),
    ("at_goal_process_tool", [], "all(goal.process != none, current.tool_for = @goal.process)", None),
    ("can_process_here", [], "all(goal.process != none, current.tool_for = @goal.process, current.open_state in [open, not_openable], current.unprocessed_targets >= 1)", None),
    ("lamp_here", [], "current.lamps >= 1", None),
    ("lamp_known", [], "known.lamp_locations >= 1", None),
    ("light_done", [], "lamp.used_with_target = true", None),
    ("goal_satisfied", [], "any(all(goal.deposit = true, goal.deposited >= @goal.count), all(goal.light = true, lamp.used_with_target = true))", None),
    ("arrived", [], "current.receptacle != none", None),
]

SKILLS = [
    ("GOTO", "go_to", ["r"], [{"r": "next_unvisited"}]),
    ("GOTO_GOAL", "go_to", ["r"], [{"r": "goal_recep"}]),
    ("GOTO_PROCESS_TOOL", "go_to", ["r"], [{"r": "process_tool"}]),
    ("GOTO_LAMP", "go_to", ["r"], [{"r": "lamp_location"}]),
    ("GOTO_TARGET", "go_to", ["r"], [{"r": "known_target"}]),
    ("OPEN", "open", ["r"], [{"r": "current"}]),
    ("TAKE", "take", ["o", "r"], [{"o": "target_here", "r": "current"}]),
    ("PUT", "move", ["o", "r"], [{"o": "held", "r": "current"}]),
    ("PROCESS_HERE", "process", ["v", "o", "t"], [{"v": "process_verb", "o": "unprocessed_target_here", "t": "current_tool"}]),
    ("USE_LAMP", "use", ["l"], [{"l": "lamp_here"}]),
    ("LOOK", "look", [], [{}]),
]

# name, params, preconditions, effects, skill, args
OPERATORS = [
    ("goto_receptacle", [("r", "receptacle")], ["has_unvisited"], [("arrived", "add")], "GOTO", {"r": "r"}),
    ("goto_goal", [("r", "receptacle")], ["ready_to_deposit"], [("at_goal_recep", "add")], "GOTO_GOAL", {"r": "r"}),
    ("goto_tool", [("r", "receptacle")], ["holds_target"], [("at_goal_process_tool", "add")], "GOTO_PROCESS_TOOL", {"r": "r"}),
    ("goto_lamp", [("r", "receptacle")], ["lamp_known"], [("lamp_here", "add")], "GOTO_LAMP", {"r": "r"}),
    ("goto_target", [("r", "receptacle")], ["target_known_elsewhere"], [("target_here", "add")], "GOTO_TARGET", {"r": "r"}),
    ("open_receptacle", [("r", "receptacle")], ["current_openable_closed"], [("current_openable_closed", "del"), ("current_accessible", "add")], "OPEN", {"r": "r"}),
    ("take_object", [("o", "object"), ("r", "receptacle")], ["hand_empty", "target_here"], [("holds_target", "add"), ("hand_empty", "del")], "TAKE", {"o": "o", "r": "r"}),
    ("put_object", [("o", "object"), ("r", "receptacle")], ["holds_target", "current_accessible"], [("hand_empty", "add"), ("holds_target", "del")], "PUT", {"o": "o", "r": "r"}),
    ("process_object", [("v", "none"), ("o", "object"), ("t", "tool")], ["unprocessed_target_here"], [("processed_target_here", "add")], "PROCESS_HERE", {"v": "v", "o": "o", "t": "t"}),
    ("use_lamp", [("l", "tool")], ["holds_target", "lamp_here"], [("light_done", "add")], "USE_LAMP", {"l": "l"}),
]

PICK_STEPS = [("find", "goto_receptacle"), ("take", "take_object"), ("transport", "goto_goal"), ("open", "open_receptacle"), ("deposit", "put_object")]
PROCESS_STEPS = [
    ("find", "goto_receptacle"),
    ("take", "take_object"),
    ("to_tool", "goto_tool"),
    ("place_in_tool", "put_object"),
    ("process", "process_object"),
    ("transport", "goto_goal"),
    ("deposit", "put_object"),
]
LIGHT_STEPS = [("find", "goto_receptacle"), ("take", "take_object"), ("to_lamp", "goto_lamp"), ("use", "use_lamp")]

TASK_SCHEMAS = [
    ("pick_and_place", "pick_and_place", {"process": None, "light": False, "count": 1}, PICK_STEPS, "goal_satisfied"),
    ("look_at_obj_in_light", "look_at_obj_in_light", {"process": None, "light": True, "count": 1}, LIGHT_STEPS, "light_done"),
    ("pick_clean_then_place", "pick_clean_then_place", {"process": "clean", "light": False, "count": 1}, PROCESS_STEPS, "goal_satisfied"),
    ("pick_heat_then_place", "pick_heat_then_place", {"process": "heat", "light": False, "count": 1}, PROCESS_STEPS, "goal_satisfied"),
    ("pick_cool_then_place", "pick_cool_then_place", {"process": "cool", "light": False, "count": 1}, PROCESS_STEPS, "goal_satisfied"),
    ("pick_two_obj_and_place", "pick_two_obj_and_place", {"process": None, "light": False, "count": 2}, PICK_STEPS, "goal_satisfied"),
]

CATEGORY = {
    "apple": "food", "egg": "food", "lettuce": "food", "potato": "food", "tomato": "food",
    "bowl": "kitchenware", "cup": "kitchenware", "mug": "kitchenware", "plate": "kitchenware",
    "book": "office", "cellphone": "office", "creditcard": "office", "keychain": "office", "pen": "office",
}
PRIORS = {
    "food": ["countertop", "fridge", "cabinet", "shelf", "drawer", "desk", "sidetable"],
    "kitchenware": ["cabinet", "countertop", "shelf", "drawer", "sidetable", "desk"],
    "office": ["desk", "sidetable", "drawer", "shelf", "cabinet", "countertop"],
}


def scaffold_entries() -> list[KbEntry]:
    out = [_e("source_contract", interface_contract())]
    for name, src, tgt, handler in GROUNDING:
        content = {"name": name, "source_field": src, "target_field": tgt, "handler": handler}
        if handler == "set_contents":
            content["threshold"] = {"value": 16, "min": 1, "max": 32}
        out.append(_e("grounding_rule", content))
    for name, params, rule, th in PREDICATES:
        content = {"name": name, "params": [{"name": p, "type": t} for p, t in params], "eval_rule": rule}
        if th is not None:
            content["threshold"] = dict(th)
        out.append(_e("predicate", content))
    for cls, (openable, tool) in sorted(RECEPTACLE_CLASSES.items()):
        facts = {"openable": openable, "portable": False, "category": "receptacle"}
        if tool:
            facts["tool_for"] = tool
        out.append(_e("object_fact", {"class": cls, "facts": facts}))
    out.append(_e("object_fact", {"class": LAMP_CLASS, "facts": {"light_source": True, "portable": False, "category": "appliance"}}))
    for cls in PORTABLE:
        out.append(_e("object_fact", {"class": cls, "facts": {"portable": True, "category": CATEGORY[cls]}}))
    for cls in PORTABLE:
        out.append(_e("spatial_prior", {"class": cls, "receptacles": list(PRIORS[CATEGORY[cls]])}))
    out.append(_e("spatial_prior", {"class": LAMP_CLASS, "receptacles": ["desk", "sidetable"]}))
    for name, params, pre, eff, skill, args in OPERATORS:
        out.append(
            _e(
                "operator",
                {
                    "name": name,
                    "params": [{"name": p, "type": t} for p, t in params],
                    "preconditions": list(pre),
                    "effects": [{"predicate": p, "sign": s} for p, s in eff],
                    "bound_skill": {"skill": skill, "args": dict(args)},
                },
            )
        )
    for name, action, params, body in SKILLS:
        out.append(_e("skill", {"name": name, "action": action, "params": list(params), "body": copy.deepcopy(body)}))
    out.append(
        _e(
            "rule",
            {
                "name": "LookAround",
                "priority": 0,
                "cond": "always",
                "action": "LOOK",
                "rationale": "Default behaviour when nothing more specific applies.",
                "expected_effect": "Keeps the episode live without changing world state.",
            },
        )
    )
    out.append(
        _e(
            "monitor",
            {
                "name": "search_exhausted",
                "trigger": "all(not(has_unvisited), hand_empty, not(target_here), not(target_known_elsewhere), not(goal_satisfied))",
                "repair_target": "LOOK",
                "protected_scope": "desk bank; fires only after every receptacle was visited without seeing a target",
            },
        )
    )
    out.append(
        _e(
            "recovery",
            {
                "name": "admissible_fallback",
                "trigger": "any(not(command_admissible), not(bind_ok), not(rule_fired))",
                "repair_target": "LOOK",
                "protected_scope": "desk bank; only active when the policy's own command is not admissible",
            },
        )
    )
    for name, fam, facts, steps, term in TASK_SCHEMAS:
        out.append(
            _e(
                "task_schema",
                {
                    "name": name,
                    "task_family": fam,
                    "facts": dict(facts),
                    "decomposition": [{"step": s, "ref": r} for s, r in steps],
                    "terminal_condition": term,
                },
            )
        )
    return out


def scaffold_kb() -> KnowledgeBase:
    return KnowledgeBase(version=0, entries=tuple(scaffold_entries()), metadata={"name": "household-scaffold", "history": []})


def _rule(name, priority, cond, action, rationale, effect):
    return {"name": name, "priority": priority, "cond": cond, "action": action, "rationale": rationale, "expected_effect": effect}


PICK_RULES = [
    _rule("DepositHeld", 60, "all(task_uses_deposit, ready_to_deposit, at_goal_recep, current_accessible)", "PUT",
          "At an accessible goal receptacle with a deposit-ready target, put it down.", "Pick tasks end with the target in the goal receptacle."),
    _rule("OpenGoalRecep", 58, "all(task_uses_deposit, ready_to_deposit, at_goal_recep, current_openable_closed)", "OPEN",
          "At the goal receptacle with the held target, closed openable containers must be opened before deposit.",
          "Closed-container deposit cases improve without changing non-openable deposit cases."),
    _rule("TransportToGoal", 55, "all(task_uses_deposit, ready_to_deposit, not(at_goal_recep))", "GOTO_GOAL",
          "Carry a deposit-ready target to a goal-class receptacle.", "Held targets reach the goal receptacle."),
    _rule("GrabTarget", 50, "all(hand_empty, target_here, current_accessible)", "TAKE",
          "Take a visible target that is not yet deposited.", "The target is held after one step."),
    _rule("OpenToSearch", 45, "all(hand_empty, current_openable_closed)", "OPEN",
          "Closed containers may hide the target.", "Search sees inside openable receptacles."),
    _rule("GoToKnownTarget", 42, "all(hand_empty, target_known_elsewhere)", "GOTO_TARGET",
          "Return to a receptacle where a target was already seen.", "Fewer wasted search steps on revisits."),
    _rule("SearchUnvisited", 40, "all(hand_empty, has_unvisited)", "GOTO",
          "Visit receptacles in spatial-prior order until a target is seen.", "Targets are found within one sweep."),
]
LIGHT_RULES = [
    _rule("UseLamp", 70, "all(holds_target, lamp_here)", "USE_LAMP",
          "Holding the target next to a lamp: switch it on.", "Light tasks succeed on the use step."),
    _rule("GoToLamp", 68, "all(holds_target, lamp_known, not(lamp_here))", "GOTO_LAMP",
          "Carry the target to a receptacle where a lamp was seen.", "The agent reaches the lamp while holding the target."),
    _rule("SearchLamp", 66, "all(holds_target, not(lamp_known), has_unvisited)", "GOTO",
          "Keep searching for a lamp once the target is in hand.", "A lamp is located without dropping the target."),
]
PROCESS_RULES = [
    _rule("ProcessHere", 88, "all(at_goal_process_tool, current_accessible, unprocessed_target_here)", "PROCESS_HERE",
          "The unprocessed target is inside an accessible goal tool: apply the process verb.", "The target carries the required process flag."),
    _rule("PlaceInTool", 84, "all(holds_target, not(held_processed), at_goal_process_tool, current_accessible)", "PUT",
          "The process verb needs the target inside the tool.", "The target is placed in the tool before processing."),
    _rule("OpenProcessTool", 82, "all(holds_target, not(held_processed), at_goal_process_tool, current_openable_closed)", "OPEN",
          "Openable tools must be opened before placing the target.", "Closed microwaves and fridges no longer block processing."),
    _rule("GoToProcessTool", 80, "all(holds_target, not(held_processed), not(at_goal_process_tool))", "GOTO_PROCESS_TOOL",
          "An unprocessed held target goes to the tool for the goal verb.", "Process tasks reach the tool after pickup."),
]


def _schema_diff(key, rules, guard, termination, metric, rationale, effect, evidence):
    schema = {"name": key, "termination": termination, "rules": copy.deepcopy(rules)}
    if guard:
        schema["guard"] = guard
    return {
        "layer": "L4",
        "key": key,
        "op": "add_policy_schema",
        "path": "procedural.schemas",
        "payload": {"schema": schema},
        "evidence": list(evidence),
        "metric": metric,
        "regression_set": "desk",
        "rationale": rationale,
        "expected_effect": effect,
    }


def replay_diff_docs() -> list[tuple[str, dict]]:
    return [
        (
            "01_pick_place_chain.diff.json",
            _schema_diff(
                "pick_place_chain", PICK_RULES, None, "goal_satisfied", "pick",
                "Every pick episode loops on LOOK: there is no search, grasp, transport or deposit behaviour.",
                "Pick tasks go from 0 to all solved; light and process tasks are unaffected.",
                ["round1:pick:all_failed_look_loop"],
            ),
        ),
        (
            "02_light.diff.json",
            _schema_diff(
                "light", LIGHT_RULES, "task_uses_light", "light_done", "light",
                "Light episodes grab the target and then sweep receptacles without ever using the lamp.",
                "Light tasks are solved; pick tasks keep their success.",
                ["round2:light:no_use_command"],
            ),
        ),
        (
            "03_process.diff.json",
            _schema_diff(
                "process", PROCESS_RULES, "task_needs_process", "goal_satisfied", "process",
                "Process episodes hold the target but never visit the tool, so ready_to_deposit stays false.",
                "Clean, heat and cool tasks are solved; pick and light tasks keep their success.",
                ["round3:process:held_unprocessed"],
            ),
        ),
    ]


def opengoalrecep_diff_doc() -> dict:
    return {
        "layer": "L4",
        "key": "OpenGoalRecep",
        "op": "add_rule",
        "path": "procedural.rules",
        "payload": {"rule": dict(PICK_RULES[1])},
        "evidence": ["pick:closed_goal_receptacle"],
        "metric": "pick",
        "regression_set": "desk",
        "rationale": PICK_RULES[1]["rationale"],
        "expected_effect": PICK_RULES[1]["expected_effect"],
    }


def _envelope(layer, key, op, path, payload, note):
    return {
        "layer": layer,
        "key": key,
        "op": op,
        "path": path,
        "payload": payload,
        "evidence": ["smoke"],
        "metric": "desk",
        "regression_set": "desk",
        "rationale": note,
        "expected_effect": "Applier-level smoke check only.",
    }


def smoke_suite_docs() -> list[tuple[str, dict, bool]]:
    """(file name, diff document, should apply) pairs: one valid and one corrupted per op."""
    valid = [
        ("modify_threshold", _envelope("L1", "has_unvisited", "modify_threshold", "predicates.has_unvisited.threshold", {"value": 2}, "Raise the unvisited threshold.")),
        ("add_predicate", _envelope("L1", "at_openable", "add_predicate", "predicates",
                                    {"predicate": {"name": "at_openable", "params": [], "eval_rule": "current.open_state in [open, closed]"}}, "Add an openability test.")),
        ("add_rule", opengoalrecep_diff_doc()),
        ("modify_rule_guard", _envelope("L4", "LookAround", "modify_rule_guard", "procedural.rules.LookAround", {"cond": "any(always, hand_empty)"}, "Restate the default guard.")),
        ("extend_skill_body", _envelope("L4", "GOTO", "extend_skill_body", "procedural.skills.GOTO", {"clause": {"r": "known_target"}}, "Fall back to known targets.")),
        ("add_object_fact", _envelope("L2", "vase", "add_object_fact", "semantic.objects", {"class": "vase", "facts": {"portable": True, "category": "decor"}}, "Declare a new object class.")),
        ("modify_priority", _envelope("L4", "LookAround", "modify_priority", "procedural.rules.LookAround", {"priority": 1}, "Bump the default rule.")),
    ]
    out = []
    for op, doc in valid:
        out.append((f"{op}.valid.diff.json", doc, True))
        bad = copy.deepcopy(doc)
        if op == "modify_threshold":
            del bad["payload"]["value"]
        elif op == "add_predicate":
            del bad["payload"]["predicate"]["eval_rule"]
        elif op == "add_rule":
            del bad["payload"]["rule"]["action"]
        elif op == "modify_rule_guard":
            bad["payload"]["cond"] = "all(always,"
        elif op == "extend_skill_body":
            bad["payload"]["clause"] = {"r": "teleport"}
        elif op == "add_object_fact":
            del bad["payload"]["facts"]
        elif op == "modify_priority":
            bad["payload"]["priority"] = "high"
        out.append((f"{op}.corrupted.diff.json", bad, False))
    return out


def solved_kb() -> KnowledgeBase:
    from .kbdiff import apply_diff, diff_from_dict

    kb = scaffold_kb()
    for _, doc in replay_diff_docs():
        kb, _ = apply_diff(kb, diff_from_dict(doc))
    return kb.replace(version=3, metadata={"name": "household-solved", "history": []})


# ---------------------------------------------------------------- shipped data access


def data_path(name: str):
    return resources.files("typedkb") / "data" / name


def load_data_kb(name: str) -> KnowledgeBase:
    return parse_kb(data_path(name).read_text(encoding="utf-8"))


def load_data_json(name: str):
    return json.loads(data_path(name).read_text(encoding="utf-8"))


def load_scaffold() -> KnowledgeBase:
    return load_data_kb("scaffold.kb.json")


def load_solved() -> KnowledgeBase:
    return load_data_kb("solved.kb.json")


def replay_dir():
    return data_path("replay")


def smoke_dir():
    return data_path("smoke")


__all__ = [
    "scaffold_kb",
    "solved_kb",
    "replay_diff_docs",
    "opengoalrecep_diff_doc",
    "smoke_suite_docs",
    "load_scaffold",
    "load_solved",
    "kb_from_document",
]
