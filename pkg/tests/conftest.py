import re

import numpy as np
import pytest
from hypothesis import settings

from bprelab.renewal import default_grid, estimate_U, estimate_V
from bprelab.stablecore import gaussian
from bprelab.streams import lane_rng

settings.register_profile("bprelab", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("bprelab")


@pytest.fixture(scope="session")
def gauss():
    return gaussian(1.0)


@pytest.fixture(scope="session")
def small_tables(gauss):
    """Modest U and V tables on [0, 40] shared by the unit tests."""
    g = default_grid(gauss, x_max=40.0)
    U = estimate_U(gauss, g, 4096, 40_000, lane_rng(11, "U"))
    V = estimate_V(gauss, -g[::-1], 4096, 40_000, lane_rng(11, "V"))
    return U, V


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report_line():
    """Record one pass/fail line per acceptance criterion (printed at the end of the run)."""
    def add(num, ok, text):
        line = f"criterion {str(num):>3}: {'PASS' if ok else 'FAIL'}  {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(re.search(r"\d+", s).group())):
            terminalreporter.write_line(line)
