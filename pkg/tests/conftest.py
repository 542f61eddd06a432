import numpy as np
import pytest

from udsgd_lab import graph


@pytest.fixture
def triangle_tail():
    """5 nodes: triangle 0-1-2 plus a 4-cycle through 2,3,4,0 (aperiodic, cycle-rich)."""
    return graph.from_edges(5, [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 0)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Register one acceptance line: ``record_criterion(id, passed, detail)``."""

    def _record(cid, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
