import numpy as np
import pytest

from roadfusion.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tensor64(rng, *shape, requires_grad=True):
    """Random float64 tensor for gradient checks."""
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)
