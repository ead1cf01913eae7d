import numpy as np
import pytest

from onepass.data import deep_fixture
from onepass.layers import Conv2DLayer, DenseLayer, Flatten, ReLU
from onepass.network import ModelSpec


@pytest.fixture(scope="session")
def deep():
    """Trained four-conv fixture shared by the slow tests (about 15 s to build)."""
    return deep_fixture()


@pytest.fixture
def small_model():
    gen = np.random.default_rng(7)
    conv = Conv2DLayer(gen.normal(size=(3, 3, 2, 4)) * 0.4, gen.normal(size=4) * 0.1, 0.5)
    dense = DenseLayer(gen.normal(size=(4 * 4 * 4, 3)) * 0.2, gen.normal(size=3) * 0.1, 0.5)
    return ModelSpec((6, 6, 2), [conv, ReLU(), Flatten(), dense], 3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
