import numpy as np
import pytest

from befunet.autograd import set_default_dtype


@pytest.fixture(autouse=True)
def float64_default():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
