import numpy as np
import pytest

from cfisac.scenario import SystemConfig, make_scenario


@pytest.fixture(scope="session")
def desk():
    return SystemConfig()


@pytest.fixture(scope="session")
def desk_stats(desk):
    return make_scenario(desk, 0)[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
