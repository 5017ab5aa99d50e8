import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = {}


def record_criterion(number, passed, detail):
    """Store and print one acceptance line; the terminal summary repeats them in order."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
