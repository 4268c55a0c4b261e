import numpy as np
import pytest

from hopqa.synth import WorldSizes, generate_dataset, generate_world


@pytest.fixture(scope="session")
def world():
    return generate_world(0)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(1, WorldSizes(entities=10, relations=3, out_degree=2))


@pytest.fixture(scope="session")
def examples(world):
    return generate_dataset(world, 10, 5, prefix="t")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from report import LINES

    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
