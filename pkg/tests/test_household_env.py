import pytest

from typedkb.fixtures import data_path
from typedkb.household_env import (
    HouseholdEnv,
    TaskBank,
    adapt_observation,
    desk_bank,
    family_banks,
    generate_bank,
    interface_contract,
    load_bank,
    solve,
)
from typedkb.kbdiff import admission_matrix


def test_desk_bank_is_reproducible(desk):
    assert desk_bank().digest == desk.digest
    assert load_bank(data_path("desk_bank.json")).digest == desk.digest
    assert len(desk) == 30


def test_seed_changes_bank(desk):
    assert desk_bank(8).digest != desk.digest


def test_family_partitions(desk):
    banks = family_banks(desk)
    assert [len(banks[k]) for k in ("pick", "light", "process")] == [10, 6, 14]


@pytest.mark.parametrize("i", range(0, 30, 3))
def test_stored_solution_replays(desk, i):
    task = desk.tasks[i]
    env = HouseholdEnv(task)
    env.reset()
    for cmd in task.solution:
        assert cmd in env.admissible()
        res = env.step(cmd)
    assert res.success and env.success()


@pytest.mark.parametrize("i", range(1, 30, 5))
def test_solution_is_shortest(desk, i):
    """Oracle: no command sequence one step shorter reaches success."""
    task = desk.tasks[i]
    assert len(solve(task)) == len(task.solution)
    assert solve(task, horizon=len(task.solution) - 1) is None


def test_inadmissible_command_is_a_noop(desk):
    env = HouseholdEnv(desk.tasks[0])
    env.reset()
    res = env.step("fly to the moon")
    assert not res.admissible and not res.done and res.observation == "Nothing happens."


def test_adapter_reads_goal_and_room(desk):
    for task in (desk.tasks[0], desk.tasks[10], desk.tasks[20]):
        env = HouseholdEnv(task)
        obs = adapt_observation(env.observe(env.reset()))
        assert obs["goal"]["family"] == task.family
        assert obs["goal"]["target"] == task.target
        assert obs["room_receptacles"]
        assert obs["invalid"] is False


def test_adapter_reads_arrival(desk):
    task = desk.tasks[0]
    env = HouseholdEnv(task)
    env.reset()
    cmd = next(c for c in env.admissible() if c.startswith("go to "))
    obs = adapt_observation(env.observe(env.step(cmd).observation))
    assert obs["location"].replace("_", " ") == cmd[len("go to "):]
    assert obs["location_state"]["state"] in ("open", "closed", "not_openable")


def test_contract_mutation_surface_matches_admission():
    surface = interface_contract()["mutation_surface"]
    assert {k: sorted(v) for k, v in surface.items()} == {k: sorted(v) for k, v in admission_matrix().items()}


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        generate_bank(1, {"juggle": 2})


def test_bank_json_roundtrip(desk):
    assert TaskBank.from_dict(desk.to_dict()).digest == desk.digest
