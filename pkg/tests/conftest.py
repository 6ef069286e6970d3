import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctrlmix.flow import ControlSystem
from ctrlmix.geometry import Circle, Sphere, Torus

settings.register_profile("ctrlmix", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ctrlmix")


@pytest.fixture(scope="session")
def torus():
    return Torus(2)


@pytest.fixture(scope="session")
def circle():
    return Circle()


@pytest.fixture(scope="session")
def sphere():
    return Sphere()


@pytest.fixture(scope="session")
def bench(torus):
    """Drift (0, sin x1) with one control along x1."""
    return ControlSystem.from_exprs(torus, ["0", "sin(x1)"], [["1", "0"]])


@pytest.fixture(scope="session")
def translation(torus):
    return ControlSystem.from_exprs(torus, ["0", "0"], [["1", "0"], ["0", "1"]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
