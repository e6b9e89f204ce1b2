import functools

import numpy as np
import pytest

from hybridns.mesh import build_structured_mesh
from hybridns.solver import Discretization


@functools.lru_cache(maxsize=None)
def discretization(k, n, pattern="diagonal", stabilization="hho"):
    """Shared, read-only discretizations (building one is the slow part)."""
    return Discretization(build_structured_mesh(n, pattern), k, stabilization)


@pytest.fixture(params=[0, 1, 2], ids=lambda k: f"k{k}")
def k(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record(name, passed, detail=""):
    """Log one acceptance criterion; the lines are repeated in the summary."""
    line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
