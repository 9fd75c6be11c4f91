import numpy as np
import pytest

from defyolo.tensor import Tensor

SEEDS = (0, 1, 2, 3, 4)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
