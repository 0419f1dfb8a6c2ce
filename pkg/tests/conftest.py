import numpy as np
import pytest

from pcma.tensor import precision


@pytest.fixture
def f64():
    """Run a test under double precision (verification setting)."""
    with precision(np.float64):
        yield
