import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amortized_cv.noise_basis import eval_basis, substream
from amortized_cv.objectives import (KINDS, evaluate_objective, gradient_sum_objective,
                                     partial_gradients_objective,
                                     squared_difference_objective)

from conftest import central_fd, rel_err


def instance(seed, batch=3, P=2, F=2):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((batch, P)), rng.standard_normal((batch, F)),
            rng.standard_normal((batch, P, F)))


class TestValues:
    def test_partial_gradients_by_hand(self):
        g = np.array([[1.0], [2.0]])
        w = np.array([[0.5], [-1.0]])
        c = np.array([[[2.0]], [[3.0]]])
        # cw = [1, -3]; sum(cw^2 - 2 g cw) = (1 - 2) + (9 + 12)
        assert partial_gradients_objective(g, w, c).value == pytest.approx(20.0)

    def test_gradient_sum_by_hand(self):
        w = np.array([[0.5], [-1.0]])
        c = np.array([[[2.0]], [[3.0]]])
        # G = 3; sum(cw^2 - 2 G cw) = (1 - 6) + (9 + 18)
        assert gradient_sum_objective(np.array([3.0]), w, c).value == pytest.approx(22.0)

    def test_squared_difference_by_hand(self):
        w = np.array([[0.5], [-1.0]])
        c = np.array([[[2.0]], [[3.0]]])
        # G - sum cw = 3 - (1 - 3) = 5
        assert squared_difference_objective(np.array([3.0]), w, c).value == pytest.approx(25.0)

    def test_dispatch(self):
        g, w, c = instance(0)
        assert evaluate_objective("partial_gradients", g, w, c).value == \
            partial_gradients_objective(g, w, c).value
        assert evaluate_objective("gradient_sum", g, w, c).value == \
            gradient_sum_objective(g.sum(0), w, c).value
        ev = evaluate_objective("squared_difference", g, w, c)
        assert ev.kind == "squared_difference"
        with pytest.raises(ValueError):
            evaluate_objective("trace", g, w, c)

    def test_sample_axis_is_averaged(self):
        g, w, c = instance(1)
        g3 = np.repeat(g[:, None, :], 4, axis=1)
        w3 = np.repeat(w[:, None, :], 4, axis=1)
        for kind in KINDS:
            assert evaluate_objective(kind, g3, eval_basis(w3, 1), c).value == \
                pytest.approx(evaluate_objective(kind, g, w, c).value)

    def test_shape_errors(self):
        g, w, c = instance(2)
        with pytest.raises(ValueError):
            partial_gradients_objective(g[:, :1], w, c)
        with pytest.raises(ValueError):
            gradient_sum_objective(np.zeros(5), w, c)
        with pytest.raises(ValueError):
            squared_difference_objective(g.sum(0), w[:, :1], c)


class TestGradients:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(KINDS))
    def test_fd(self, seed, kind):
        g, w, c = instance(seed, batch=4, P=3, F=2)
        ev = evaluate_objective(kind, g, w, c)
        fd = central_fd(lambda cc: evaluate_objective(kind, g, w, cc).value, c)
        assert rel_err(ev.d_coeff, fd) < 1e-6

    def test_zero_gradient_at_exact_fit(self):
        rng = substream(0, "fit")
        w = rng.standard_normal((3, 2))
        c = rng.standard_normal((3, 2, 2))
        g = np.einsum("bpf,bf->bp", c, w)
        ev = squared_difference_objective(g.sum(0), w, c)
        assert ev.value == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(ev.d_coeff, 0.0, atol=1e-12)
        np.testing.assert_allclose(partial_gradients_objective(g, w, c).d_coeff, 0.0,
                                   atol=1e-12)
