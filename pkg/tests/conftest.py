import numpy as np
import pytest

from distann.vectors import VectorDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian(n, dim, seed=0):
    return VectorDataset(np.random.default_rng(seed).standard_normal((n, dim)).astype(np.float32))


def integer_data(n, dim, seed=0, lo=-8, hi=9):
    """Small integer-valued floats: every distance sum is exact in float32 and float64."""
    x = np.random.default_rng(seed).integers(lo, hi, size=(n, dim)).astype(np.float32)
    return VectorDataset(x)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
