from dataclasses import replace

import numpy as np
import pytest

from puffassim.scenario import default_scenario
from puffassim.windfield import GridSpec, WindObservation


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture(scope="session")
def small_scenario(scenario):
    return replace(scenario, particles=20)


@pytest.fixture(scope="session")
def winds(scenario):
    return scenario.wind_observations()


@pytest.fixture
def grid10():
    return GridSpec(origin=(0.0, 0.0), dx=1.0, dy=1.0, nx=10, ny=10)


def station(sid, x, y, speed, direction, t=0.0):
    return WindObservation(sid, (float(x), float(y), 10.0), t, speed, direction)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
