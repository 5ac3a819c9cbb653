import numpy as np
import pytest

from odernn.diagnostics import finite_difference


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def fd(fn, x, eps=1e-6):
    return finite_difference(fn, x, eps)
