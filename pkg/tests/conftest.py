import numpy as np
import pytest

from amps.cutting import generate_beam, generate_brick
from amps.sparse import SparseMatrix


def random_spd(n, density=0.3, seed=0, shift=None):
    """Random symmetric positive definite SparseMatrix."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    a[rng.random((n, n)) > density] = 0.0
    a = a + a.T
    if shift is None:
        shift = n * 2.0
    a += shift * np.eye(n)
    return SparseMatrix.from_dense(a)


@pytest.fixture(scope="session")
def beam2():
    return generate_beam(2)


@pytest.fixture(scope="session")
def beam4():
    return generate_beam(4)


@pytest.fixture(scope="session")
def brick0():
    return generate_brick(0)
