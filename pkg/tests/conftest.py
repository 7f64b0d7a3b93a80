import numpy as np
import pytest

from hkq.kernel import FrequencyProfile, PhysicalConstants, solve_pinney


@pytest.fixture(scope="session")
def hbar1():
    return PhysicalConstants(1.0)


@pytest.fixture(scope="session")
def modulated():
    return FrequencyProfile.modulated(1.0, 0.2, 1.3)


@pytest.fixture(scope="session")
def modulated_pinney(modulated):
    return solve_pinney(modulated, 1.0, t_span=(0.0, 20.0), tol=1e-9)


@pytest.fixture(scope="session")
def short_pinney(modulated):
    return solve_pinney(modulated, 1.0, t_span=(0.0, 4.0), tol=1e-9)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
