import numpy as np
import pytest

from impest import synthetic as syn

from helpers import noiseless_case


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_feeder():
    """Seven buses, four single-phase users on a three-phase trunk."""
    return syn.radial_feeder(3, 4, seed=3)


@pytest.fixture(scope="session")
def small_case(small_feeder):
    return noiseless_case(small_feeder, 3, seed=4, scale=2.0)


@pytest.fixture(scope="session")
def resistive():
    return syn.resistive_fixture()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][2:])):
            terminalreporter.write_line(line)
