import numpy as np
import pytest

from pdecnn.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def central_diff(f, x, d, h=1e-6):
    return (f(x + h * d) - f(x - h * d)) / (2 * h)


def rel(a, b):
    return abs(a - b) / (abs(a) + abs(b) + 1e-12)


# acceptance tests append "PASS/FAIL/SKIP <criterion>: <detail>" lines here
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
