import numpy as np
import pytest

from admlkit.numcore import make_rng

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return make_rng(12345)


def record(criterion, passed, detail=""):
    """Log one acceptance line; ``passed=None`` marks a criterion that was not run."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"criterion {criterion}: {status}  {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_err(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
