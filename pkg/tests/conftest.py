import sys

import numpy as np
import pytest

from cnnpose.molecule import AtomTypeTable, Ligand, Receptor


@pytest.fixture
def table():
    return AtomTypeTable((("A", 1.5), ("B", 1.9)))


@pytest.fixture
def chain(table):
    """A-B-C-D chain with one rotatable bond B->C moving D."""
    coords = [[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [2.0, 1.4, 0.0], [3.5, 1.6, 0.3]]
    return Ligand(coords, [0, 1, 0, 1], table, 0, [(1, 2, {3})])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_receptor(rng, table, n=20, spread=5.0):
    return Receptor(rng.uniform(-spread, spread, size=(n, 3)), rng.integers(0, len(table), size=n), table)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
