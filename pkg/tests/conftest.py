import pytest

from regimelq import TimeGrid, generate_scenarios
from regimelq.oracle import (
    classical_reference,
    driven_benchmark,
    homogeneous_benchmark,
    indefinite_benchmark,
)


@pytest.fixture(scope="session")
def grid_1k():
    return TimeGrid(0.0, 1.0, 1000)


@pytest.fixture(scope="session")
def grid_200():
    return TimeGrid(0.0, 1.0, 200)


@pytest.fixture(scope="session")
def homogeneous_suite():
    return homogeneous_benchmark()


@pytest.fixture(scope="session")
def driven_suite():
    return driven_benchmark()


@pytest.fixture(scope="session")
def classical_suite():
    return classical_reference()


@pytest.fixture(scope="session")
def indefinite_suite():
    return indefinite_benchmark()


@pytest.fixture(scope="session")
def driven_scenarios_small(driven_suite, grid_1k):
    return generate_scenarios(driven_suite.spec, grid_1k, 2000, seed=2024)


def zscore(estimate, truth, se):
    return abs(estimate - truth) / max(se, 1e-300)


def assert_within(estimate, truth, se, sigmas=3.0, label=""):
    z = zscore(estimate, truth, se)
    assert z <= sigmas, (
        f"{label}: {estimate:.6g} vs {truth:.6g} is {z:.2f} sigmas "
        f"(se={se:.3g})"
    )
