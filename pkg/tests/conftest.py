import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def weights42():
    from agilereg import nnet

    return nnet.init_weights_seeded(nnet.NetworkSpec(), 42)


@pytest.fixture(scope="session")
def registrar42(weights42):
    from agilereg.pipeline import Registrar

    return Registrar(weights42)


@pytest.fixture(scope="session")
def scene512():
    from agilereg.scenes import dead_leaves

    return dead_leaves(512, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import lines

    out = lines()
    if out:
        terminalreporter.section("acceptance criteria")
        for line in out:
            terminalreporter.write_line(line)
