import numpy as np
import pytest

from phymt.numerics import SeededRng


@pytest.fixture
def rng():
    return SeededRng(1234)


def rand_unitary_ok(U, tol=1e-10):
    return np.abs(U.conj().T @ U - np.eye(U.shape[1])).max() < tol
