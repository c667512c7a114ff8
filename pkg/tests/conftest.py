import numpy as np
import pytest

from voxalign.grid import GridDims, GridGeometry


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def unit_geom():
    return GridGeometry(GridDims(8, 8, 8), (0.0, 0.0, 0.0), 0.2)


def make_geom(x, y, z, size=0.2):
    return GridGeometry(GridDims(x, y, z), (0.0, 0.0, 0.0), size)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
