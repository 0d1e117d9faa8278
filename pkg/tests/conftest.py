import numpy as np
import pytest

from mflab.fields import build_field
from mflab.measures import LabelSpace

SPIKE_COEFFS = {"a": 0.5, "b": 0.3, "c": 0.2, "d_": 0.4, "e": 0.2, "f": 0.1}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def space3():
    return LabelSpace.from_points([0.0, 0.5, 1.0])


@pytest.fixture
def linear_field(space3):
    return build_field("linear", "linear", space3, 1, SPIKE_COEFFS)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
