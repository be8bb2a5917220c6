import numpy as np
import pytest

from xmodnet.data import synthetic_dataset, synthetic_splits
from xmodnet.model import init_network

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    """10 classes x 20 separable examples at 16px."""
    return synthetic_dataset(10, 20, resolution=16, mode="separable", seed=3)


@pytest.fixture(scope="session")
def separable_32():
    return synthetic_dataset(10, 20, resolution=32, mode="separable", seed=0)


@pytest.fixture(scope="session")
def small_splits():
    return synthetic_splits(8, 12, resolution=16, mode="separable", seed=5)


@pytest.fixture
def baseline_net():
    return init_network("baseline", seed=11)


@pytest.fixture
def crossmod_net():
    return init_network("crossmod", seed=11)


@pytest.fixture(scope="session")
def acceptance():
    """Recorder for acceptance criteria; lines are echoed in the terminal summary."""

    def record(number, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
