import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st
from hypothesis.extra.numpy import arrays

from filtstab.chain_core import FilteringModel, Generator, ObservationModel, delyon_cycle, two_state

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def generators(draw, min_dim=2, max_dim=6, dense=True):
    """Irreducible generators: a positive cycle plus random extra rates."""
    d = draw(st.integers(min_dim, max_dim))
    extra = draw(arrays(float, (d, d), elements=st.floats(0.0, 5.0)))
    if not dense:
        mask = draw(arrays(bool, (d, d)))
        extra = extra * mask
    cyc = draw(st.floats(0.1, 3.0))
    off = extra + cyc * np.roll(np.eye(d), 1, axis=1)
    np.fill_diagonal(off, 0.0)
    return Generator(off - np.diag(off.sum(axis=1)))


@st.composite
def distributions(draw, d, positive=False):
    lo = 0.01 if positive else 0.0
    w = draw(arrays(float, d, elements=st.floats(lo, 1.0)))
    if w.sum() == 0:
        w[0] = 1.0
    return w / w.sum()


@pytest.fixture
def example1():
    return two_state(1.0, 2.0)


@pytest.fixture
def example1_model(example1):
    return FilteringModel(example1, ObservationModel(np.array([[1.0], [0.0]]), np.eye(1)))


@pytest.fixture
def cycle():
    return delyon_cycle()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
