import numpy as np
import pytest

from cascade_stereo.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(array, grad=True):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=grad)


# Acceptance criteria register their outcome here; printed after the run.
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number}. {title}: {detail}")
