import numpy as np
import pytest
from scipy.linalg import expm

from twoscale.chain_core import PolynomialGenerator, TwoScaleModel
from twoscale.harness import reference_model

SYM2 = np.array([[-1.0, 1.0], [1.0, -1.0]])


@pytest.fixture
def sym2():
    return PolynomialGenerator.constant(SYM2)


@pytest.fixture
def tilted2():
    # A(t) = [[-(1+t), 1+t], [1, -1]], nu(t) = (1/(2+t), (1+t)/(2+t))
    return PolynomialGenerator([[[-1.0, 1.0], [1.0, -1.0]], [[-1.0, 1.0], [0.0, 0.0]]])


@pytest.fixture
def ref_model():
    return reference_model(0.1)


def random_generator(rng, m, low=0.2, high=2.0):
    q = rng.uniform(low, high, (m, m))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


def deviation_by_quadrature(q, nu, tau_max, h):
    """Trapezoid rule for integral_0^tau_max (exp(Q tau) - 1 nu) d tau."""
    m = q.shape[0]
    one_nu = np.outer(np.ones(m), nu)
    step = expm(h * q)
    cur = np.eye(m)
    total = 0.5 * (cur - one_nu)
    n = int(round(tau_max / h))
    for k in range(1, n + 1):
        cur = cur @ step
        total += (cur - one_nu) if k < n else 0.5 * (cur - one_nu)
    return h * total


def two_scale(fast, slow=None, eps=0.1, T=1.0):
    slow = slow if slow is not None else PolynomialGenerator.zero(fast.dimension)
    return TwoScaleModel(fast, slow, eps, T)
