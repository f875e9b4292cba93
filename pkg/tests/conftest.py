import pytest

from plancentric.agent_core import ScriptedActor, ScriptedPlanner, run_episode
from plancentric.env_sim import World, load_world_spec


def zero_clock() -> float:
    return 0.0


@pytest.fixture(scope="session")
def shop():
    return load_world_spec("synthshop")


@pytest.fixture(scope="session")
def maps():
    return load_world_spec("synthmaps")


@pytest.fixture(scope="session")
def bench():
    return load_world_spec("planbench")


def scripted_run(spec, task_id, script=None, memory_mgr=None, **kw):
    task = spec.task(task_id)
    return run_episode(World.from_spec(spec), task, ScriptedPlanner(script, spec=spec), ScriptedActor(),
                       memory_mgr, clock=zero_clock, **kw)


# Acceptance results, one line per criterion, echoed after the run.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
