import numpy as np
import pytest

from dummyproto import kernels


@pytest.fixture(params=kernels.available_backends())
def each_backend(request):
    """Run a test under every available kernel backend, restoring the default."""
    previous = kernels.active_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
