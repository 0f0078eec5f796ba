import math

import numpy as np
import pytest

from safestab import (
    Box,
    BoxComplement,
    PerturbedSystem,
    parse_vector_field,
)

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


ROOT_LEFT = (1.0 - math.sqrt(2.0)) / 2.0  # stable equilibrium under d = -0.25


@pytest.fixture(scope="session")
def linear_field():
    return parse_vector_field(["-x"], ["x"])


@pytest.fixture(scope="session")
def linear_sys(linear_field):
    return PerturbedSystem(linear_field, 0.0)


@pytest.fixture(scope="session")
def bench_field():
    # x' = -x + x^2: under d = +/-0.25 the extreme equilibria are 0.5 and ROOT_LEFT
    return parse_vector_field(["-x + x^2"], ["x"])


@pytest.fixture(scope="session")
def bench_sys(bench_field):
    return PerturbedSystem(bench_field, 0.25)


@pytest.fixture(scope="session")
def bench_sets():
    return {
        "W": Box((-1.0,), (-0.9,)),
        "U": BoxComplement(Box((-1e9,), (0.6,))),
        "Omega": Box((-0.25,), (0.5,)),
        "A": Box((ROOT_LEFT,), (0.5,)),
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(20240814)
