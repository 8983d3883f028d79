"""Fixed vocabularies shared by the type checker and the executor.

These are substrate, not learned content: the executor implements every name
listed here, and KB entries may only refer to them.
"""

import re

LAYERS = ("S0", "L0", "L1", "L2", "L3", "L4", "L5", "L6", "L7")

LAYER_ROLES = {
    "S0": "Source",
    "L0": "Grounding",
    "L1": "Predicates",
    "L2": "Ontology",
    "L3": "Operators",
    "L4": "PolicySchemas",
    "L5": "MonitorsRecovery",
    "L6": "Experience",
    "L7": "Goals",
}

SEMANTIC_TYPES = ("object", "receptacle", "tool", "none")

IDENT = re.compile(r"^[a-z][a-z0-9_]{0,63}$")
RULE_NAME = re.compile(r"^[A-Z][A-Za-z0-9]{0,63}$")
SKILL_NAME = re.compile(r"^[A-Z][A-Z0-9_]{0,63}$")

# grounded-state fields maintained by L0 grounding rules
STATE_FIELDS = (
    "goal",
    "known_receptacles",
    "current_receptacle",
    "visited",
    "open_state",
    "visible_contents",
    "inventory",
    "processed_flags",
    "lamp_used_with",
    "admissible_commands",
    "last_invalid",
)

# field path -> (value kind, state fields it reads)
FIELD_PATHS = {
    "current.receptacle": ("id", ("current_receptacle",)),
    "current.class": ("class", ("current_receptacle",)),
    "current.open_state": ("enum", ("current_receptacle", "open_state")),
    "current.tool_for": ("word", ("current_receptacle",)),
    "current.content_classes": ("list", ("current_receptacle", "visible_contents")),
    "current.targets": ("int", ("current_receptacle", "visible_contents", "goal")),
    "current.unprocessed_targets": ("int", ("current_receptacle", "visible_contents", "goal", "processed_flags")),
    "current.processed_targets": ("int", ("current_receptacle", "visible_contents", "goal", "processed_flags")),
    "current.lamps": ("int", ("current_receptacle", "visible_contents")),
    "inventory.count": ("int", ("inventory",)),
    "held.class": ("class", ("inventory",)),
    "held.is_target": ("bool", ("inventory", "goal")),
    "held.processed": ("list", ("inventory", "processed_flags")),
    "goal.family": ("word", ("goal",)),
    "goal.target": ("class", ("goal",)),
    "goal.recep": ("class", ("goal",)),
    "goal.process": ("word", ("goal",)),
    "goal.light": ("bool", ("goal",)),
    "goal.count": ("int", ("goal",)),
    "goal.deposit": ("bool", ("goal",)),
    "goal.deposited": ("int", ("goal", "visible_contents", "processed_flags")),
    "known.target_locations": ("int", ("current_receptacle", "visible_contents", "goal", "processed_flags")),
    "known.lamp_locations": ("int", ("visible_contents",)),
    "known.tool_locations": ("int", ("known_receptacles", "goal")),
    "unvisited.count": ("int", ("known_receptacles", "visited")),
    "visited.count": ("int", ("visited",)),
    "step.index": ("int", ()),
    "last.invalid": ("bool", ("last_invalid",)),
    "lamp.used_with_target": ("bool", ("lamp_used_with", "goal")),
}

# grounding handler -> (observation field it consumes, state field it writes)
GROUNDING_HANDLERS = {
    "set_goal": ("goal", "goal"),
    "set_known": ("room_receptacles", "known_receptacles"),
    "set_location": ("location", "current_receptacle"),
    "mark_visited": ("location", "visited"),
    "set_open_state": ("location_state", "open_state"),
    "set_contents": ("location_contents", "visible_contents"),
    "pickup": ("picked", "inventory"),
    "place": ("placed", "inventory"),
    "mark_opened": ("opened", "open_state"),
    "mark_closed": ("closed", "open_state"),
    "mark_processed": ("processed", "processed_flags"),
    "mark_lamp": ("lamp_on", "lamp_used_with"),
    "set_inventory": ("carrying", "inventory"),
    "set_admissible": ("admissible", "admissible_commands"),
    "set_invalid": ("invalid", "last_invalid"),
}

# skill argument selectors -> semantic type of the value they produce
SELECTORS = {
    "next_unvisited": "receptacle",
    "goal_recep": "receptacle",
    "process_tool": "receptacle",
    "lamp_location": "receptacle",
    "known_target": "receptacle",
    "current": "receptacle",
    "current_tool": "tool",
    "held": "object",
    "target_here": "object",
    "unprocessed_target_here": "object",
    "lamp_here": "tool",
    "process_verb": "none",
}

# executor-computed tests usable in L5 triggers
HELPER_TESTS = ("command_admissible", "rule_fired", "bind_ok")

OBJECT_FACT_KEYS = {
    "openable": bool,
    "tool_for": str,
    "light_source": bool,
    "portable": bool,
    "category": str,
}

EXPERIENCE_STATUSES = ("kept", "reverted", "apply_failed")
