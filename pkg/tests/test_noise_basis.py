import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amortized_cv.noise_basis import (FEATURE_VARIANCES, InvalidCholeskyError, NoiseDraw,
                                      UnsupportedOrderError, eval_basis, gauss_hermite,
                                      gaussian_expectation, reparameterize, sample_noise,
                                      substream)


def normal_moment(k):
    # E[eps^k] for a standard normal: (k-1)!! for even k, zero for odd k.
    if k % 2:
        return 0.0
    return float(np.prod(np.arange(k - 1, 0, -2))) if k else 1.0


class TestSampling:
    def test_shape_and_seed(self):
        draw = sample_noise(3, 4, 5, 2, batch_indices=[1, 2, 3, 4])
        assert isinstance(draw, NoiseDraw)
        assert draw.shape == (4, 5, 2)
        assert draw.seed == 3
        assert draw.batch_indices == (1, 2, 3, 4)

    def test_fixed_seed_reproducible(self):
        a = sample_noise(11, 3, 2, 2).epsilon
        b = sample_noise(11, 3, 2, 2).epsilon
        np.testing.assert_array_equal(a, b)

    def test_generator_is_advanced(self):
        rng = np.random.default_rng(0)
        a = sample_noise(rng, 2, 2, 2).epsilon
        b = sample_noise(rng, 2, 2, 2).epsilon
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("args", [(0, 1, 1), (1, 0, 1), (1, 1, 0)])
    def test_rejects_empty(self, args):
        with pytest.raises(ValueError):
            sample_noise(0, *args)

    def test_substreams_are_distinct_and_stable(self):
        a = substream(0, "data").standard_normal(3)
        np.testing.assert_array_equal(a, substream(0, "data").standard_normal(3))
        assert not np.array_equal(a, substream(0, "model").standard_normal(3))
        assert not np.array_equal(a, substream(1, "data").standard_normal(3))


class TestBasis:
    def test_layout(self):
        eps = np.array([[[0.5, -2.0]]])
        w = eval_basis(eps, 3).w
        np.testing.assert_allclose(w[0, 0], [0.5, -2.0, -0.75, 3.0, 0.125, -8.0])

    @pytest.mark.parametrize("order", [0, 4, -1])
    def test_unsupported_order(self, order):
        with pytest.raises(UnsupportedOrderError):
            eval_basis(np.zeros((1, 1, 1)), order)

    def test_accepts_noise_draw(self):
        draw = sample_noise(0, 2, 3, 2)
        b = eval_basis(draw, 2)
        assert b.w.shape == (2, 3, 4)
        assert b.order == 2

    def test_zero_mean_by_quadrature(self):
        means = gaussian_expectation(lambda e: eval_basis(e, 3).w, 1, 20)
        np.testing.assert_allclose(means, 0.0, atol=1e-12)

    def test_feature_variances_match_moment_oracle(self):
        # Var[eps]=E eps^2, Var[eps^2-1]=E eps^4 - 1, Var[eps^3]=E eps^6.
        oracle = (normal_moment(2), normal_moment(4) - 1, normal_moment(6))
        assert oracle == (1.0, 2.0, 15.0)
        assert tuple(FEATURE_VARIANCES) == oracle
        var = gaussian_expectation(lambda e: eval_basis(e, 3).w ** 2, 1, 20)
        np.testing.assert_allclose(var, oracle, rtol=1e-12)

    def test_monte_carlo_moments(self):
        w = eval_basis(substream(5, "mc").standard_normal((200_000, 1)), 3).w
        se = np.sqrt(np.array([1.0, 2.0, 15.0]) / w.shape[0])
        assert np.all(np.abs(w.mean(axis=0)) < 4 * se)


class TestReparameterize:
    def test_matches_matrix_product(self):
        L = np.array([[1.0, 0.0], [0.3, 2.0]])
        eps = np.array([[1.0, -1.0], [0.5, 0.25]])
        out = reparameterize([1.0, 2.0], L, eps)
        np.testing.assert_allclose(out, [[2.0, 2.0 + 0.3 - 2.0], [1.5, 2.0 + 0.15 + 0.5]])

    def test_covariance(self):
        L = np.array([[1.0, 0.0], [0.6, 0.8]])
        z = reparameterize(np.zeros(2), L, substream(0, "r").standard_normal((200_000, 2)))
        np.testing.assert_allclose(np.cov(z.T), L @ L.T, atol=0.02)

    @pytest.mark.parametrize("L", [
        np.array([[1.0, 0.0], [0.0, 0.0]]),
        np.array([[1.0, 0.1], [0.0, 1.0]]),
        np.ones((2, 3)),
        np.array([[-1.0, 0.0], [0.0, 1.0]]),
    ])
    def test_invalid_factor(self, L):
        with pytest.raises(InvalidCholeskyError):
            reparameterize(np.zeros(2), L, np.zeros((1, 2)))


class TestQuadrature:
    def test_weights_normalized(self):
        nodes, weights = gauss_hermite(7, 2)
        assert nodes.shape == (49, 2)
        assert weights.sum() == pytest.approx(1.0, abs=1e-14)

    @given(st.integers(0, 12))
    def test_moments_exact(self, k):
        got = gaussian_expectation(lambda e: e[:, 0] ** k, 1, 10)
        assert got == pytest.approx(normal_moment(k), rel=1e-10, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2, 2))
    def test_gaussian_mgf(self, a, b):
        got = gaussian_expectation(lambda e: np.exp(e @ np.array([a, b])), 2, 30)
        assert got == pytest.approx(np.exp(0.5 * (a * a + b * b)), rel=1e-10)
