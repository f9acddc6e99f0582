import numpy as np
import pytest
from hypothesis import settings

from dro_pref.synth_env import generate_env, sample_dataset

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")

# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def small_env():
    return generate_env(11, 5, 4, 3, 2, 1.0, 2.0)


@pytest.fixture(scope="session")
def small_data(small_env):
    return sample_dataset(small_env, 400, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
