import numpy as np
import pytest

from loopsoup.paths import Domain, TimeGrid
from loopsoup.potentials import ModelParams, make_potential


@pytest.fixture
def grid():
    return TimeGrid(1.0, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def box2():
    return Domain.box(0.0, 2.0)


def params(family="zero", mu=0.0, **kw):
    return ModelParams(3, 1.0, mu, make_potential(family, **kw))
