import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from twoscale.chain_core import CallableGenerator, PolynomialGenerator, quasi_stationary, validate_generator
from twoscale.queue_models import (
    QueueModel,
    build_generator,
    queue_nu_closed_form,
    queue_occupation_band,
    queue_two_scale_model,
)


def random_queue(rng, capacity=None):
    m0 = int(capacity or rng.integers(1, 7))
    return QueueModel(
        capacity=m0,
        lambda_base=rng.uniform(0.3, 3.0, m0),
        mu_base=rng.uniform(0.3, 3.0, m0),
        lambda_mod=(rng.uniform(0.5, 2.0), rng.uniform(-0.3, 0.3), rng.uniform(0.0, 0.3)),
        mu_mod=(rng.uniform(0.5, 2.0), rng.uniform(0.0, 0.5)),
    )


class TestBuildGenerator:

    def test_two_state(self):
        g = build_generator(QueueModel(1, [2.0], [3.0]))
        npt.assert_allclose(g(0.4), [[-2.0, 2.0], [3.0, -3.0]])

    def test_polynomial_modulation_is_exact(self):
        q = QueueModel(2, [1.0, 2.0], [3.0, 4.0], lambda_mod=(1.0, 1.0), mu_mod=(2.0,))
        g = build_generator(q)
        assert isinstance(g, PolynomialGenerator)
        t = 0.3
        expected = np.array([[-1.3, 1.3, 0.0], [6.0, -8.6, 2.6], [0.0, 8.0, -8.0]])
        npt.assert_allclose(g(t), expected, atol=1e-14)

    def test_callable_modulation(self):
        q = QueueModel(2, [1.0, 1.0], [1.0, 1.0], lambda_mod=lambda t: 1.5 + np.sin(t), mu_mod=lambda t: 1.0)
        g = build_generator(q)
        assert isinstance(g, CallableGenerator)
        assert validate_generator(g, np.linspace(0, 1, 5)).ok

    def test_row_sums_and_tridiagonal(self):
        rng = np.random.default_rng(0)
        q = random_queue(rng, 5)
        mats = build_generator(q)(rng.uniform(0, 1, 20))
        npt.assert_allclose(mats.sum(axis=2), 0.0, atol=1e-13)
        i, j = np.indices((6, 6))
        assert np.all(mats[:, np.abs(i - j) > 1] == 0.0)

    def test_rejects_vanishing_modulation(self):
        with pytest.raises(ValueError):
            QueueModel(1, [1.0], [1.0], lambda_mod=(1.0, -1.0))
        with pytest.raises(ValueError):
            QueueModel(2, [1.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            QueueModel(1, [0.0], [1.0])

    def test_json_roundtrip(self, tmp_path):
        q = QueueModel(2, [1.0, 2.0], [3.0, 4.0], lambda_mod=(1.0, 0.5), mu_mod=(1.0,))
        path = tmp_path / "q.json"
        path.write_text(json.dumps(q.to_json()))
        back = QueueModel.from_json(path)
        npt.assert_allclose(build_generator(back)(0.7), build_generator(q)(0.7))

    def test_slow_defaults_to_zero(self):
        model = queue_two_scale_model(QueueModel(1, [1.0], [1.0]), 0.1)
        npt.assert_array_equal(model.slow(0.5), 0.0)


class TestClosedForm:

    def test_uniform_under_symmetry(self):
        q = QueueModel(4, [1.3] * 4, [1.3] * 4, lambda_mod=(1.0, 0.5), mu_mod=(1.0, 0.5))
        npt.assert_allclose(queue_nu_closed_form(q, 0.6), [0.2] * 5, atol=1e-15)

    def test_two_state(self):
        q = QueueModel(1, [2.0], [3.0], lambda_mod=(1.0, 1.0), mu_mod=(1.0,))
        t = 0.5
        lam, mu = 1.5, 1.0
        expected = np.array([mu * 3.0, lam * 2.0]) / (mu * 3.0 + lam * 2.0)
        npt.assert_allclose(queue_nu_closed_form(q, t), expected, atol=1e-15)

    def test_geometric_weights(self):
        q = QueueModel(2, [1.0, 1.0], [1.0, 1.0], lambda_mod=(2.0,), mu_mod=(1.0,))
        npt.assert_allclose(queue_nu_closed_form(q, 0.1), np.array([1, 2, 4]) / 7, atol=1e-15)

    def test_vectorized_shape(self):
        q = QueueModel(2, [1.0, 1.0], [1.0, 1.0])
        assert queue_nu_closed_form(q, np.zeros((3, 4))).shape == (3, 4, 3)

    def test_long_queue_does_not_overflow(self):
        q = QueueModel(400, [5.0] * 400, [1.0] * 400)
        nu = queue_nu_closed_form(q, 0.0)
        assert np.isfinite(nu).all() and nu.sum() == pytest.approx(1.0)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_generic_solver(self, seed):
        rng = np.random.default_rng(seed)
        q = random_queue(rng)
        g = build_generator(q)
        ts = rng.uniform(0, 1, 20)
        npt.assert_allclose(quasi_stationary(g, ts), queue_nu_closed_form(q, ts), atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_detailed_balance(self, seed):
        rng = np.random.default_rng(seed)
        q = random_queue(rng)
        t = float(rng.uniform(0, 1))
        nu = queue_nu_closed_form(q, t)
        up = nu[:-1] * q.modulation("lambda", t) * q.lambda_base
        down = nu[1:] * q.modulation("mu", t) * q.mu_base
        npt.assert_allclose(up, down, atol=1e-12)


class TestBand:

    def test_degenerate_at_zero(self):
        assert queue_occupation_band(QueueModel(1, [1.0], [1.0]), 0, 0.01, 0.0) == (0.0, 0.0)

    @pytest.mark.parametrize("level", [0.9, 0.95])
    def test_symmetric_two_state(self, level):
        q = QueueModel(1, [1.0], [1.0])
        t, eps = 0.8, 0.01
        center, half = queue_occupation_band(q, 0, eps, t, level)
        assert center == pytest.approx(t / 2, abs=1e-10)
        assert half == pytest.approx(norm.ppf(0.5 + level / 2) * np.sqrt(0.25 * eps * t), rel=1e-9)

    def test_invalid_level(self):
        with pytest.raises(ValueError):
            queue_occupation_band(QueueModel(1, [1.0], [1.0]), 0, 0.01, 1.0, level=1.0)
