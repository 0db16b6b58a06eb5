import numpy as np
import pytest

from reroute.tensor import use_dtype


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with float64 as the default element type."""
    with use_dtype(np.float64):
        yield
