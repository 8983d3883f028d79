import pytest

from typedkb.fixtures import load_scaffold, load_solved, replay_diff_docs
from typedkb.household_env import desk_bank

ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def scaffold():
    return load_scaffold()


@pytest.fixture(scope="session")
def solved():
    return load_solved()


@pytest.fixture(scope="session")
def desk():
    return desk_bank()


@pytest.fixture(scope="session")
def replay_docs():
    return [doc for _, doc in replay_diff_docs()]


@pytest.fixture(scope="session")
def solved_records(solved, desk):
    from typedkb.executor import run_tasks

    return run_tasks(solved, desk.tasks)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
