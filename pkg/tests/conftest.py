import numpy as np
import pytest

from kdsde.components import SubProbMeasure, ball, interval


@pytest.fixture
def unit_interval():
    return interval(0.0, 1.0)


@pytest.fixture
def half_line():
    return interval(0.0, float('inf'))


@pytest.fixture
def unit_disc():
    return ball([0.0, 0.0], 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def dirac(unit_interval):
    def make(x, weight=1.0):
        return SubProbMeasure.dirac(unit_interval, [x], weight)
    return make
