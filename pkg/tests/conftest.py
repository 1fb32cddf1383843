import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatmask.camera import default_frontal
from splatmask.embedder import SurrogateEmbedder
from splatmask.scene import synth_scene

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Lines collected by the acceptance module and echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def embedder():
    return SurrogateEmbedder(0, "A")


@pytest.fixture(scope="session")
def blob20():
    return synth_scene(3, 20, "blob")


@pytest.fixture(scope="session")
def head():
    return synth_scene(1000, 300, "head_like")


@pytest.fixture(scope="session")
def view32():
    return default_frontal(32, 32)


@pytest.fixture(scope="session")
def view64():
    return default_frontal(64, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
