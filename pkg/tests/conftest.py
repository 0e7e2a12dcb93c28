import numpy as np
import pytest

from ricci_couple import models

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def euclid2():
    return models.build(models.ModelSpec(kind="euclidean", dim=2, horizon=(0.0, 1.0)))


@pytest.fixture
def sphere2():
    return models.build(models.ModelSpec(kind="sphere_backward_ricci", dim=2, horizon=(0.0, 1.0),
                                         parameters={"c0": 1.0}))


@pytest.fixture
def hyper2():
    return models.build(models.ModelSpec(kind="hyperbolic_scaled", dim=2, horizon=(0.0, 0.2),
                                         parameters={"c0": 1.0}))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
