import numpy as np
import pytest

from acceptance_log import LINES
from feater.core.rng import RngStream


@pytest.fixture
def rng():
    return RngStream(1234, "tests")


def randomize_affine(params, rng, scale=0.1):
    """Give zero biases / unit gains some spread so every path is exercised."""
    for name, t in params.tensors().items():
        if not name.startswith("w_"):
            t.data += rng.normal(t.shape, scale)
    return params


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
