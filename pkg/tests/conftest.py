import numpy as np
import pytest

from echosr import synthesize_dataset
from echosr.degradation import make_sr_pairs


@pytest.fixture(scope="session")
def small_ds():
    return synthesize_dataset(12, image_size=64, seed=0)


@pytest.fixture(scope="session")
def good_pairs():
    ds = synthesize_dataset(24, image_size=64, seed=5)
    good = ds.filter(quality="Good")
    return make_sr_pairs(list(good)[:8], 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(LINES):
            terminalreporter.write_line(line)
