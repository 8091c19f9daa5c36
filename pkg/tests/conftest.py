import pytest

from digiworld.demo import demo_pools, demo_rollout, persona_path
from digiworld.generator import StubGenerator
from digiworld.seedpool import SamplerConfig
from digiworld.taskgen import build_task_set
from digiworld.worldio import load_persona_file
from digiworld.worldstate import new_world


@pytest.fixture
def persona():
    return load_persona_file(persona_path("p01"))


@pytest.fixture
def fresh_world(persona):
    return new_world(persona, seed=3)


@pytest.fixture(scope="session")
def pools():
    return demo_pools(SamplerConfig())


@pytest.fixture(scope="session")
def rollout30():
    return demo_rollout(seed=5, rounds=30, task_rounds=[20, 30])


@pytest.fixture(scope="session")
def snap30(rollout30):
    return rollout30.snapshots[30]


@pytest.fixture(scope="session")
def bundle():
    """Accepted instances from three personas, with their snapshots keyed by digest."""
    instances, snaps = [], {}
    for i, pid in enumerate(["p01", "p02", "p03"]):
        gen = StubGenerator(i)
        ro = demo_rollout(seed=i, rounds=50, persona_id=pid, task_rounds=[20, 30, 40, 50], gen=gen)
        accepted, _ = build_task_set(ro.snapshots, [20, 30, 40, 50], gen, history=ro.history)
        instances += accepted
        snaps.update({s.digest: s for s in ro.snapshots.values()})
    return instances, snaps


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
