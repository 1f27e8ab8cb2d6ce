import numpy as np
import pytest

from delaybsde.levy import LevyModel
from delaybsde.paths import CadlagPath


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_atoms():
    """Symmetric jumps of size ±0.1 at rate 1 each."""
    return LevyModel.from_atoms([(0.1, 1.0), (-0.1, 1.0)])


@pytest.fixture
def no_jumps():
    return LevyModel.no_jumps()


@pytest.fixture
def start_at_one():
    return CadlagPath(0.0, 0.01, [[1.0]])


@pytest.fixture
def start_at_zero():
    return CadlagPath(0.0, 0.01, [[0.0]])


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the summary hook prints them in order at the end of the run."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
