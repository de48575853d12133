import numpy as np
import pytest

from headfit.geometry import CameraPose, Intrinsics
from headfit.model import generate_procedural_model, instantiate, sample_shape


@pytest.fixture(scope="session")
def small_model():
    return generate_procedural_model(n_subdiv=3, n_components=10, seed=0)


@pytest.fixture(scope="session")
def tiny_model():
    return generate_procedural_model(n_subdiv=2, n_components=6, seed=1)


@pytest.fixture(scope="session")
def medium_model():
    return generate_procedural_model(n_subdiv=4, n_components=30, seed=0)


@pytest.fixture(scope="session")
def small_subject(small_model):
    rng = np.random.default_rng(7)
    y = sample_shape(small_model, rng, 0.7)
    return y, instantiate(small_model, y)


@pytest.fixture
def frontal():
    return CameraPose.looking_at((0.0, 0.0, 0.0), 450.0)


@pytest.fixture
def K128():
    return Intrinsics.prior(128, 128)


@pytest.fixture
def K256():
    return Intrinsics.prior(256, 256)


def finite_difference(f, x, h=1e-6):
    """Central differences of a vector function; columns follow ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
