import numpy as np
import pytest

from focalfuse.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def t32(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


def kink_free(rng, shape, gap=0.1):
    """Random values bounded away from zero (safe for relu checks)."""
    x = rng.standard_normal(shape)
    return np.sign(x) * (gap + np.abs(x))


def distinct(rng, shape, step=0.01):
    """Random values that differ pairwise by at least ``step`` (safe for max-pool checks)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * step - n * step / 2).reshape(shape)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
