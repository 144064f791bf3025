import numpy as np
import pytest

from lapar import kernels

BACKENDS = sorted(kernels.backends())


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
