"""Seed-generated household text environment (single room, receptacle hopping).

Observations are plain text plus the admissible command list.  Success is a
pure function of the world state; nothing here reads a knowledge base.
"""

from __future__ import annotations

import copy
import hashlib
import json
import random
import re
from collections import deque
from dataclasses import asdict, dataclass, field

GRAMMAR_VERSION = "household-text/1"
DEFAULT_HORIZON = 50

FAMILIES = (
    "pick_and_place",
    "look_at_obj_in_light",
    "pick_clean_then_place",
    "pick_heat_then_place",
    "pick_cool_then_place",
    "pick_two_obj_and_place",
)
SHORT_FAMILY = {
    "pick": "pick_and_place",
    "light": "look_at_obj_in_light",
    "clean": "pick_clean_then_place",
    "heat": "pick_heat_then_place",
    "cool": "pick_cool_then_place",
    "two": "pick_two_obj_and_place",
}
FAMILY_SHORT = {v: k for k, v in SHORT_FAMILY.items()}
FAMILY_VERB = {
    "pick_clean_then_place": "clean",
    "pick_heat_then_place": "heat",
    "pick_cool_then_place": "cool",
}
VERB_ADJ = {"clean": "clean", "heat": "hot", "cool": "cool"}
ADJ_VERB = {v: k for k, v in VERB_ADJ.items()}

# class -> (openable, tool_for)
RECEPTACLE_CLASSES = {
    "cabinet": (True, None),
    "drawer": (True, None),
    "fridge": (True, "cool"),
    "microwave": (True, "heat"),
    "countertop": (False, None),
    "shelf": (False, None),
    "desk": (False, None),
    "sidetable": (False, None),
    "sinkbasin": (False, "clean"),
}
TOOL_FOR_VERB = {"clean": "sinkbasin", "heat": "microwave", "cool": "fridge"}
REPEATABLE = ("cabinet", "drawer", "shelf", "countertop")
LAMP_HOSTS = ("desk", "sidetable")
PICK_GOALS = ("cabinet", "drawer", "shelf", "countertop", "desk", "sidetable")
PROCESS_GOALS = ("cabinet", "drawer", "shelf", "countertop", "sidetable")

LAMP_CLASS = "desklamp"
PORTABLE = (
    "apple", "book", "bowl", "cellphone", "creditcard", "cup", "egg", "keychain",
    "lettuce", "mug", "pen", "plate", "potato", "tomato",
)
OBJECT_CLASSES = PORTABLE + (LAMP_CLASS,)
PROCESSABLE = {
    "clean": ("apple", "bowl", "cup", "lettuce", "mug", "plate", "tomato"),
    "heat": ("apple", "cup", "egg", "mug", "plate", "potato", "tomato"),
    "cool": ("apple", "cup", "egg", "lettuce", "mug", "potato", "tomato"),
}
LIGHT_TARGETS = ("book", "cellphone", "creditcard", "keychain", "pen", "mug")

NOTHING = "Nothing happens."


def to_text(ident: str) -> str:
    return ident.replace("_", " ")


def from_text(words: str) -> str:
    return words.strip().replace(" ", "_")


def class_of(ident: str) -> str:
    return ident.rsplit("_", 1)[0]


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _id_key(ident: str):
    cls, _, n = ident.rpartition("_")
    return (cls, int(n) if n.isdigit() else 0)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family: str
    target: str
    recep: str | None
    seed: str
    world: dict = field(repr=False)
    solution: tuple = field(default=(), repr=False)

    @property
    def verb(self) -> str | None:
        return FAMILY_VERB.get(self.family)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["solution"] = list(self.solution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["task_id"], d["family"], d["target"], d.get("recep"), d["seed"], d["world"], tuple(d.get("solution", ())))


@dataclass(frozen=True)
class TaskBank:
    name: str
    seed: int
    mix: dict
    tasks: tuple
    horizon: int = DEFAULT_HORIZON

    def __len__(self):
        return len(self.tasks)

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def subset(self, name: str, families) -> "TaskBank":
        fams = {SHORT_FAMILY.get(f, f) for f in families}
        tasks = tuple(t for t in self.tasks if t.family in fams)
        mix = {k: v for k, v in self.mix.items() if SHORT_FAMILY.get(k, k) in fams}
        return TaskBank(name, self.seed, mix, tasks, self.horizon)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "mix": dict(self.mix),
            "horizon": self.horizon,
            "tasks": [t.to_dict() for t in self.tasks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TaskBank":
        return cls(d["name"], d["seed"], dict(d["mix"]), tuple(TaskSpec.from_dict(t) for t in d["tasks"]), d.get("horizon", DEFAULT_HORIZON))


def load_bank(path) -> TaskBank:
    with open(path, encoding="utf-8") as fh:
        return TaskBank.from_dict(json.load(fh))


def save_bank(bank: TaskBank, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(bank.to_json())


# ---------------------------------------------------------------- world


class World:
    """Mutable world state for one episode."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.receptacles: dict[str, dict] = {}
        for r in task.world["receptacles"]:
            openable = RECEPTACLE_CLASSES[class_of(r["id"])][0]
            self.receptacles[r["id"]] = {"openable": openable, "open": False, "contents": list(r["contents"])}
        self.objects: dict[str, dict] = {}
        for rid, rec in self.receptacles.items():
            for o in rec["contents"]:
                self.objects[o] = {"location": rid, "processed": set()}
        self.location: str | None = None
        self.inventory: list[str] = []
        self.lit_with: set[str] = set()

    # -- queries
    def accessible(self, rid: str) -> bool:
        rec = self.receptacles[rid]
        return not rec["openable"] or rec["open"]

    def order(self) -> list[str]:
        return sorted(self.receptacles, key=_id_key)

    def key(self):
        """Hashable snapshot used by the solver."""
        return (
            self.location,
            tuple(self.inventory),
            tuple(sorted(r for r, v in self.receptacles.items() if v["open"])),
            tuple(sorted((o, v["location"], tuple(sorted(v["processed"]))) for o, v in self.objects.items())),
            tuple(sorted(self.lit_with)),
        )

    def clone(self) -> "World":
        w = World.__new__(World)
        w.task = self.task
        w.receptacles = {k: {"openable": v["openable"], "open": v["open"], "contents": list(v["contents"])} for k, v in self.receptacles.items()}
        w.objects = {k: {"location": v["location"], "processed": set(v["processed"])} for k, v in self.objects.items()}
        w.location = self.location
        w.inventory = list(self.inventory)
        w.lit_with = set(self.lit_with)
        return w

    def admissible(self) -> list[str]:
        cmds = ["inventory", "look"]
        for rid in self.receptacles:
            if rid != self.location:
                cmds.append(f"go to {to_text(rid)}")
        here = self.location
        if here is not None:
            rec = self.receptacles[here]
            if rec["openable"]:
                cmds.append(f"{'close' if rec['open'] else 'open'} {to_text(here)}")
            if self.accessible(here):
                if not self.inventory:
                    for o in rec["contents"]:
                        if class_of(o) in PORTABLE:
                            cmds.append(f"take {to_text(o)} from {to_text(here)}")
                for o in self.inventory:
                    cmds.append(f"move {to_text(o)} to {to_text(here)}")
                verb = RECEPTACLE_CLASSES[class_of(here)][1]
                if verb is not None:
                    for o in rec["contents"]:
                        if class_of(o) in PORTABLE:
                            cmds.append(f"{verb} {to_text(o)} with {to_text(here)}")
            for o in rec["contents"]:
                if class_of(o) == LAMP_CLASS:
                    cmds.append(f"use {to_text(o)}")
        return sorted(set(cmds))

    def _describe(self, rid: str, lead: str) -> str:
        rec = self.receptacles[rid]
        name = to_text(rid)
        items = ", ".join(to_text(o) for o in rec["contents"]) or "nothing"
        if rec["openable"]:
            if not rec["open"]:
                return f"{lead} {name}. It is closed."
            return f"{lead} {name}. It is open. In it, you see {items}."
        return f"{lead} {name}. On it, you see {items}."

    def goal_sentence(self) -> str:
        t, r, fam = self.task.target, self.task.recep, self.task.family
        if fam == "look_at_obj_in_light":
            return f"Your task is to look at {_article(t)} {t} under the {LAMP_CLASS}."
        if fam == "pick_two_obj_and_place":
            return f"Your task is to put two {t} in {_article(r)} {r}."
        if fam in FAMILY_VERB:
            adj = VERB_ADJ[FAMILY_VERB[fam]]
            return f"Your task is to put {_article(adj)} {adj} {t} in {_article(r)} {r}."
        return f"Your task is to put {_article(t)} {t} in {_article(r)} {r}."

    def room_sentence(self) -> str:
        return "You see " + ", ".join(to_text(r) for r in self.order()) + "."

    # -- transitions
    def apply(self, command: str) -> str | None:
        """Apply an admissible command and return its observation; None if inadmissible."""
        if command not in self.admissible():
            return None
        words = command.split(" ")
        if command == "look":
            if self.location is None:
                return "You are in the middle of the room. " + self.room_sentence()
            return self._describe(self.location, "You are at")
        if command == "inventory":
            if not self.inventory:
                return "You are not carrying anything."
            return "You are carrying: " + ", ".join(to_text(o) for o in self.inventory) + "."
        if command.startswith("go to "):
            rid = from_text(command[6:])
            self.location = rid
            return self._describe(rid, "You arrive at")
        if words[0] == "open":
            rid = from_text(command[5:])
            self.receptacles[rid]["open"] = True
            items = ", ".join(to_text(o) for o in self.receptacles[rid]["contents"]) or "nothing"
            return f"You open {to_text(rid)}. In it, you see {items}."
        if words[0] == "close":
            rid = from_text(command[6:])
            self.receptacles[rid]["open"] = False
            return f"You close {to_text(rid)}."
        m = re.fullmatch(r"take (.+) from (.+)", command)
        if m:
            o, r = from_text(m.group(1)), from_text(m.group(2))
            self.receptacles[r]["contents"].remove(o)
            self.objects[o]["location"] = "agent"
            self.inventory.append(o)
            return f"You pick up {to_text(o)} from {to_text(r)}."
        m = re.fullmatch(r"move (.+) to (.+)", command)
        if m:
            o, r = from_text(m.group(1)), from_text(m.group(2))
            self.inventory.remove(o)
            self.receptacles[r]["contents"].append(o)
            self.objects[o]["location"] = r
            return f"You move {to_text(o)} to {to_text(r)}."
        m = re.fullmatch(r"(clean|heat|cool) (.+) with (.+)", command)
        if m:
            verb, o, t = m.group(1), from_text(m.group(2)), from_text(m.group(3))
            self.objects[o]["processed"].add(verb)
            return f"You {verb} {to_text(o)} using {to_text(t)}."
        m = re.fullmatch(r"use (.+)", command)
        if m:
            lamp = from_text(m.group(1))
            self.lit_with.update(self.inventory)
            return f"You turn on {to_text(lamp)}."
        raise AssertionError(f"admissible command without effect rule: {command}")  # pragma: no cover

    def success(self) -> bool:
        return success_predicate(self.task, self)


def success_predicate(task: TaskSpec, world: World) -> bool:
    fam = task.family
    targets = [o for o in world.objects if class_of(o) == task.target]
    if fam == "look_at_obj_in_light":
        return any(o in world.lit_with for o in targets)

    def placed(o):
        loc = world.objects[o]["location"]
        return loc in world.receptacles and class_of(loc) == task.recep

    verb = FAMILY_VERB.get(fam)
    done = [o for o in targets if placed(o) and (verb is None or verb in world.objects[o]["processed"])]
    return len(done) >= (2 if fam == "pick_two_obj_and_place" else 1)


@dataclass(frozen=True)
class StepResult:
    observation: str
    done: bool
    success: bool
    admissible: bool


class HouseholdEnv:
    """One episode over a generated task."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.world = World(task)
        self.steps = 0

    def reset(self) -> str:
        self.world = World(self.task)
        self.steps = 0
        return self.world.goal_sentence() + " " + self.world.room_sentence()

    def admissible(self) -> list[str]:
        return self.world.admissible()

    def observe(self, text: str) -> dict:
        return {"text": text, "admissible": self.admissible()}

    def step(self, command: str) -> StepResult:
        self.steps += 1
        obs = self.world.apply(command)
        ok = obs is not None
        success = self.world.success()
        return StepResult(obs if ok else NOTHING, success, success, ok)

    def success(self) -> bool:
        return self.world.success()


# ---------------------------------------------------------------- solver


def _relevant(cmd: str, target: str) -> bool:
    if cmd in ("look", "inventory") or cmd.startswith("close "):
        return False
    m = re.match(r"(?:take|move|clean|heat|cool) (\S+) \d+ ", cmd)
    if m and m.group(1) != target:
        return False
    return True


def solve(task: TaskSpec, horizon: int = DEFAULT_HORIZON) -> list[str] | None:
    """Shortest command sequence reaching success, by breadth-first search.

    Closing, looking, inventory and manipulating non-target objects never help
    reach a goal state, so they are pruned from the frontier.
    """
    start = World(task)
    if start.success():
        return []
    seen = {start.key()}
    frontier = deque([(start, [])])
    while frontier:
        world, path = frontier.popleft()
        if len(path) >= horizon:
            continue
        for cmd in world.admissible():
            if not _relevant(cmd, task.target):
                continue
            nxt = world.clone()
            nxt.apply(cmd)
            k = nxt.key()
            if k in seen:
                continue
            if nxt.success():
                return path + [cmd]
            seen.add(k)
            frontier.append((nxt, path + [cmd]))
    return None


# ---------------------------------------------------------------- generation


def _build_world(rng: random.Random, family: str) -> tuple[str, str | None, dict]:
    verb = FAMILY_VERB.get(family)
    if family == "look_at_obj_in_light":
        target, recep = rng.choice(LIGHT_TARGETS), None
    elif verb is not None:
        target, recep = rng.choice(PROCESSABLE[verb]), rng.choice(PROCESS_GOALS)
    else:
        target, recep = rng.choice(PORTABLE), rng.choice(PICK_GOALS)

    required = []
    if recep is not None:
        required.append(recep)
    if verb is not None:
        required.append(TOOL_FOR_VERB[verb])
    lamp_host = None
    if family == "look_at_obj_in_light":
        lamp_host = rng.choice(LAMP_HOSTS)
        required.append(lamp_host)
    n_rec = rng.randint(4, 8)
    classes = list(required)
    pool = sorted(RECEPTACLE_CLASSES)
    while len(classes) < n_rec:
        c = rng.choice(pool)
        if c in classes and c not in REPEATABLE:
            continue
        classes.append(c)
    counts: dict[str, int] = {}
    recs = []
    for c in classes:
        counts[c] = counts.get(c, 0) + 1
        recs.append(f"{c}_{counts[c]}")
    contents: dict[str, list[str]] = {r: [] for r in recs}

    forbidden = {recep} | set(TOOL_FOR_VERB.values())
    spots = [r for r in recs if class_of(r) not in forbidden]
    if not spots:
        return target, recep, {}
    n_targets = 2 if family == "pick_two_obj_and_place" else 1
    objs: list[tuple[str, str]] = []
    for _ in range(n_targets):
        objs.append((target, rng.choice(spots)))
    if lamp_host is not None:
        host = [r for r in recs if class_of(r) == lamp_host][0]
        objs.append((LAMP_CLASS, host))
    n_obj = rng.randint(6, 12)
    distractors = [c for c in PORTABLE if c != target]
    while len(objs) < n_obj:
        objs.append((rng.choice(distractors), rng.choice(recs)))
    ocount: dict[str, int] = {}
    for cls, where in objs:
        ocount[cls] = ocount.get(cls, 0) + 1
        contents[where].append(f"{cls}_{ocount[cls]}")
    world = {"receptacles": [{"id": r, "contents": contents[r]} for r in recs]}
    return target, recep, world


def generate_task(seed, family: str, index: int, horizon: int = DEFAULT_HORIZON) -> TaskSpec:
    family = SHORT_FAMILY.get(family, family)
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}")
    for attempt in range(1000):
        tag = f"{seed}:{family}:{index}" + (f":{attempt}" if attempt else "")
        rng = random.Random(tag)
        target, recep, world = _build_world(rng, family)
        if not world:
            continue
        task = TaskSpec(f"{FAMILY_SHORT[family]}-{index:03d}", family, target, recep, tag, world)
        plan = solve(task, horizon)
        if plan is not None:
            return TaskSpec(task.task_id, family, target, recep, tag, world, tuple(plan))
    raise RuntimeError(f"no solvable world for {family} #{index}")  # pragma: no cover


def generate_bank(seed, family_mix: dict, name: str = "bank", horizon: int = DEFAULT_HORIZON) -> TaskBank:
    """Deterministic bank; families appear in the canonical family order."""
    for k, v in family_mix.items():
        if SHORT_FAMILY.get(k, k) not in FAMILIES:
            raise ValueError(f"unknown task family {k!r}")
        if v < 0:
            raise ValueError("family counts must be non-negative")
    by_family = {SHORT_FAMILY.get(k, k): v for k, v in family_mix.items()}
    tasks = []
    for fam in FAMILIES:
        for i in range(by_family.get(fam, 0)):
            tasks.append(generate_task(seed, fam, i, horizon))
    return TaskBank(name, seed, dict(family_mix), tuple(tasks), horizon)


DESK_MIX = {"pick": 10, "light": 6, "clean": 5, "heat": 5, "cool": 4}
DESK_SEED = 7


def desk_bank(seed: int = DESK_SEED) -> TaskBank:
    return generate_bank(seed, DESK_MIX, name="desk")


def family_banks(bank: TaskBank) -> dict[str, TaskBank]:
    """Named sub-banks: the whole bank plus pick / light / process partitions."""
    out = {bank.name: bank}
    out["pick"] = bank.subset("pick", ["pick"])
    out["light"] = bank.subset("light", ["light"])
    out["process"] = bank.subset("process", ["clean", "heat", "cool"])
    if any(t.family == "pick_two_obj_and_place" for t in bank.tasks):
        out["two"] = bank.subset("two", ["two"])
    return out


# ---------------------------------------------------------------- contract and adapter


def interface_contract() -> dict:
    """Content of the S0 source contract: the environment's manual."""
    return {
        "name": "household",
        "grammar": GRAMMAR_VERSION,
        "observation_fields": {
            "text": "text",
            "admissible": "list[command]",
            "goal": "goal",
            "room_receptacles": "list[receptacle]",
            "location": "receptacle",
            "location_state": "open_state",
            "location_contents": "contents",
            "picked": "object_at",
            "placed": "object_at",
            "opened": "receptacle",
            "closed": "receptacle",
            "processed": "object_verb",
            "lamp_on": "tool",
            "carrying": "list[object]",
            "invalid": "bool",
        },
        "required_fields": ["text", "admissible"],
        "actions": {
            "go_to": {"template": "go to {0}", "args": ["receptacle"]},
            "open": {"template": "open {0}", "args": ["receptacle"]},
            "close": {"template": "close {0}", "args": ["receptacle"]},
            "take": {"template": "take {0} from {1}", "args": ["object", "receptacle"]},
            "move": {"template": "move {0} to {1}", "args": ["object", "receptacle"]},
            "use": {"template": "use {0}", "args": ["tool"]},
            "process": {"template": "{0} {1} with {2}", "args": ["none", "object", "tool"]},
            "look": {"template": "look", "args": []},
            "inventory": {"template": "inventory", "args": []},
        },
        "object_classes": sorted(OBJECT_CLASSES),
        "receptacle_classes": sorted(RECEPTACLE_CLASSES),
        "process_verbs": sorted(TOOL_FOR_VERB),
        "helpers": ["bind_ok", "command_admissible", "rule_fired"],
        "success_signal": (
            "environment verdict per family: target-class object in a goal-class receptacle; "
            "lamp used while holding the target; processed target in a goal-class receptacle; "
            "two targets in goal-class receptacles"
        ),
        "mutation_surface": {
            "S0": ["declare_source_binding"],
            "L0": ["modify_threshold"],
            "L1": ["add_predicate", "modify_threshold"],
            "L2": ["add_object_fact"],
            "L3": ["add_operator_schema"],
            "L4": ["add_rule", "modify_rule_guard", "modify_priority", "add_policy_schema", "add_skill", "extend_skill_body"],
            "L5": ["add_monitor", "add_recovery_rule"],
            "L6": ["append_experience"],
            "L7": ["add_task_schema", "add_goal_fact"],
        },
    }


def contract_digest(contract: dict) -> str:
    return hashlib.sha256(json.dumps(contract, sort_keys=True).encode()).hexdigest()


_GOAL_PATTERNS = (
    (re.compile(r"Your task is to look at an? (\w+) under the desklamp\."), "look_at_obj_in_light"),
    (re.compile(r"Your task is to put two (\w+) in an? (\w+)\."), "pick_two_obj_and_place"),
    (re.compile(r"Your task is to put an? (clean|hot|cool) (\w+) in an? (\w+)\."), None),
    (re.compile(r"Your task is to put an? (\w+) in an? (\w+)\."), "pick_and_place"),
)
_PLACE = re.compile(r"You (arrive at|are at) ([a-z]+ \d+)\. (It is closed\.|It is open\. In it, you see (.*)\.|On it, you see (.*)\.)")
_ITEMS = re.compile(r"[a-z]+ \d+")


def _items(text: str | None) -> list[str]:
    if not text or text == "nothing":
        return []
    return [from_text(x) for x in _ITEMS.findall(text)]


def adapt_observation(obs: dict) -> dict:
    """Parse a raw observation ``{"text", "admissible"}`` into named fields."""
    text = obs["text"]
    out: dict = {"text": text, "admissible": list(obs["admissible"])}
    for pat, fam in _GOAL_PATTERNS:
        m = pat.search(text)
        if not m:
            continue
        if fam == "look_at_obj_in_light":
            out["goal"] = {"family": fam, "target": m.group(1), "recep": None}
        elif fam is None:
            verb = ADJ_VERB[m.group(1)]
            out["goal"] = {"family": f"pick_{verb}_then_place", "target": m.group(2), "recep": m.group(3)}
        else:
            out["goal"] = {"family": fam, "target": m.group(1), "recep": m.group(2)}
        break
    m = re.search(r"You see (.*)\.$", text)
    if m:
        out["room_receptacles"] = _items(m.group(1))
    m = _PLACE.search(text)
    if m:
        rid = from_text(m.group(2))
        out["location"] = rid
        if m.group(3).startswith("It is closed"):
            out["location_state"] = {"receptacle": rid, "state": "closed"}
        elif m.group(3).startswith("It is open"):
            out["location_state"] = {"receptacle": rid, "state": "open"}
            out["location_contents"] = {"receptacle": rid, "items": _items(m.group(4))}
        else:
            out["location_state"] = {"receptacle": rid, "state": "not_openable"}
            out["location_contents"] = {"receptacle": rid, "items": _items(m.group(5))}
    m = re.fullmatch(r"You open ([a-z]+ \d+)\. In it, you see (.*)\.", text)
    if m:
        rid = from_text(m.group(1))
        out["opened"] = rid
        out["location_contents"] = {"receptacle": rid, "items": _items(m.group(2))}
    m = re.fullmatch(r"You close ([a-z]+ \d+)\.", text)
    if m:
        out["closed"] = from_text(m.group(1))
    m = re.fullmatch(r"You pick up ([a-z]+ \d+) from ([a-z]+ \d+)\.", text)
    if m:
        out["picked"] = {"object": from_text(m.group(1)), "receptacle": from_text(m.group(2))}
    m = re.fullmatch(r"You move ([a-z]+ \d+) to ([a-z]+ \d+)\.", text)
    if m:
        out["placed"] = {"object": from_text(m.group(1)), "receptacle": from_text(m.group(2))}
    m = re.fullmatch(r"You (clean|heat|cool) ([a-z]+ \d+) using ([a-z]+ \d+)\.", text)
    if m:
        out["processed"] = {"object": from_text(m.group(2)), "verb": m.group(1)}
    m = re.fullmatch(r"You turn on ([a-z]+ \d+)\.", text)
    if m:
        out["lamp_on"] = from_text(m.group(1))
    if text.startswith("You are carrying: "):
        out["carrying"] = _items(text[len("You are carrying: "):])
    elif text == "You are not carrying anything.":
        out["carrying"] = []
    out["invalid"] = text == NOTHING
    return out


# registry of observation adapters keyed by contract grammar
ADAPTERS = {GRAMMAR_VERSION: adapt_observation}


def world_snapshot(world: World) -> dict:
    return copy.deepcopy({"receptacles": world.receptacles, "location": world.location, "inventory": world.inventory})
