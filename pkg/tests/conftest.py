import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_simplex(rng, d, size=None):
    return rng.dirichlet(np.ones(d), size=size)


def random_symmetric(rng, d, k):
    from polydiff.measure_poly import symmetrize

    return symmetrize(rng.standard_normal((d,) * k))
