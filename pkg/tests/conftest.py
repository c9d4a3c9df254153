import numpy as np
import pytest

from qbnn import quant


@pytest.fixture(autouse=True)
def debug_profile():
    # accumulator overflow is a hard error under test
    quant.set_profile("debug")
    yield
    quant.set_profile("release")


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
