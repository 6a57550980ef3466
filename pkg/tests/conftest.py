import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mpcnet.benchmarks import double_integrator_2d, system_4d
from mpcnet.polytope import max_control_invariant

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def spec2d():
    return double_integrator_2d()


@pytest.fixture(scope="session")
def spec4d():
    return system_4d()


@pytest.fixture(scope="session")
def cinf2d(spec2d):
    return max_control_invariant(spec2d.sys, spec2d.x_set, spec2d.u_set).polytope


@pytest.fixture(scope="session")
def cinf4d(spec4d):
    return max_control_invariant(spec4d.sys, spec4d.x_set, spec4d.u_set).polytope


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
