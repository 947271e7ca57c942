import numpy as np
import pytest

from saor import autodiff as ad
from saor._fpu import flush_subnormals

flush_subnormals()


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
