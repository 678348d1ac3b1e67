import os

import pytest
from hypothesis import HealthCheck, settings

from assembly_monitor.cli import bundled
from assembly_monitor.fusion import load_calibrations, load_tray_regions
from assembly_monitor.planner import build_state_graph
from assembly_monitor.simulator import Rig
from assembly_monitor.task import load_task, parse_task_definition

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def lego():
    return load_task(bundled("lego.task"))


@pytest.fixture(scope="session")
def lego_graph(lego):
    return build_state_graph(lego)


@pytest.fixture(scope="session")
def rig(lego):
    return Rig.default(lego)


@pytest.fixture(scope="session")
def rig_files():
    return load_calibrations(bundled("lego.calib")), load_tray_regions(bundled("lego.trays"))


@pytest.fixture(scope="session")
def lego_log(tmp_path_factory, lego, lego_graph):
    """A noise-free 10,000-frame simulated session written to a log."""
    from assembly_monitor.ingest import write_log
    from assembly_monitor.simulator import random_session
    s = random_session(lego, lego_graph, seed=0, frames=10_000)
    path = tmp_path_factory.mktemp("logs") / "lego10k.detlog"
    write_log(path, (m for msgs in s.frames() for m in msgs))
    return path, s


def make_task(body: str, header: str = "objects:\n  element A, B\n  tray T1, T2\n"):
    return parse_task_definition(header + body)


ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k)):
            terminalreporter.write_line(ACCEPTANCE[key])
