import numpy as np
import pytest

from dua.bench.data import synth_digits


@pytest.fixture(scope="session")
def digits():
    return synth_digits(11, 60, "digits")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from _report import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
