import numpy as np
import pytest

from gtare_lab.game_model import load_builtin
from gtare_lab.nested_iteration import run_nested_iteration

TWO_STATE_REFERENCE = np.array([[1.9397, -0.3990], [-0.3990, 1.7771]])
SQRT2_M1 = np.sqrt(2.0) - 1.0


@pytest.fixture(scope="session")
def two_state():
    return load_builtin("two_state")


@pytest.fixture(scope="session")
def stm():
    return load_builtin("stm")


@pytest.fixture(scope="session")
def two_state_nested(two_state):
    return run_nested_iteration(two_state, tol=1e-10)


@pytest.fixture(scope="session")
def stm_nested(stm):
    return run_nested_iteration(stm, tol=1e-12)


ACCEPTANCE_LINES = []


def verdict(number, title, ok, detail=""):
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
