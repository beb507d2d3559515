import time

import pytest

from backupsafe import sim
from backupsafe.safety import SafetyGains
from backupsafe.unicycle import ObstacleTrack

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []
# wall-clock seconds of the session-scoped runs below
RUNTIMES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


BACKUP_STATIC = sim.ScenarioConfig(controller="backup")
BACKUP_MOVING = sim.ScenarioConfig(controller="backup", obstacle=ObstacleTrack(kind="sinusoidal"))
CBF_UNBOUNDED = sim.ScenarioConfig(controller="cbf-unbounded", gains=SafetyGains(delta_heading=0.5))
CBF_STALL = sim.ScenarioConfig(controller="cbf-unbounded")


@pytest.fixture(scope="session")
def backup_static_log():
    start = time.perf_counter()
    log = sim.run_scenario(BACKUP_STATIC)
    RUNTIMES["backup_static"] = time.perf_counter() - start
    return log


@pytest.fixture(scope="session")
def cbf_stall_log():
    start = time.perf_counter()
    log = sim.run_scenario(CBF_STALL)
    RUNTIMES["cbf_stall"] = time.perf_counter() - start
    return log
