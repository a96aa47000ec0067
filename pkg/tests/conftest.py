import numpy as np
import pytest
from hypothesis import settings

from safeobs.system import van_der_pol_model

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def vdp():
    sys, expansion = van_der_pol_model(0.01, 1e-2)
    return sys, expansion


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
