import numpy as np
import pytest

from narrowbert import backends


@pytest.fixture(params=backends.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    prev = backends.get().NAME
    backends.use_backend(request.param)
    yield request.param
    backends.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
