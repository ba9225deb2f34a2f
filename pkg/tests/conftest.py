import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_phantom():
    from tumorseg.phantom import PhantomSpec, generate_phantom
    return generate_phantom(PhantomSpec(dims=(32, 32, 32), seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
