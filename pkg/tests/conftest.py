import functools

import pytest

from mixflow.picard import solve_fixed_point
from mixflow.scenarios import builtin

ACCEPTANCE_LINES = []


@functools.lru_cache(maxsize=None)
def solved(name, n_t=129, n_z=129):
    sc = builtin(name, n_t, n_z)
    return sc, solve_fixed_point(sc.mixture, sc.density, sc.grid)


@pytest.fixture(scope="session")
def solve():
    return solved


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
