import numpy as np
import pytest

from sodkit import backend


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(params=backend.available())
def kernels(request):
    """Each kernel backend in turn (compiled, if built, and python)."""
    return backend.get(request.param)
