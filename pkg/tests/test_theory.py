import warnings

import numpy as np
import pytest

from amortized_cv.models import QuadraticSpec, random_quadratic_spec
from amortized_cv.noise_basis import substream
from amortized_cv.theory import (PreconditionError, ControlledQuadratic, VacuousBoundWarning,
                                 relaxed_cv_bound, noise_floor, run_controlled_sgd,
                                 stationary_mean_sq, exact_cv_bound,
                                 verify_cocoercivity)

H2 = np.diag([1.0, 2.0])


def second_moment_oracle(spec, theta0, T):
    """Exact E|theta_t - theta*|^2 by propagating mean and covariance."""
    A = np.eye(spec.quadratic.P) - spec.eta * spec.quadratic.H_mat
    R = spec.residual_coupling
    Q = spec.eta ** 2 * R @ R.T
    mean = np.asarray(theta0, float) - spec.theta_star
    cov = np.zeros((len(mean), len(mean)))
    out = [mean @ mean]
    for _ in range(T):
        mean = A @ mean
        cov = A @ cov @ A.T + Q
        out.append(mean @ mean + np.trace(cov))
    return np.array(out)


class TestConstants:
    def test_perfect_cv_rate(self):
        spec = ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), eta=0.125)
        assert spec.M_bar == 0.0 and spec.M == 0.0
        # 1 - eta*H*(1 - eta*2L) with H=1, L=2, eta=1/8
        assert spec.rate == 0.9375
        assert exact_cv_bound(spec, [1.0, 1.0], 0) == 2.0
        assert exact_cv_bound(spec, [1.0, 1.0], 10) == pytest.approx(2 * 0.9375 ** 10)

    def test_relaxed_constants(self):
        spec = ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), B_tilde=0.5 * np.eye(2),
                                 eta=0.125)
        assert spec.M_bar == 0.5
        assert spec.M == np.inf
        assert spec.rate_bar == 0.9375
        # 2 eta^2 Mbar / (1 - cbar) = 2/64 * 0.5 / 0.0625
        assert noise_floor(spec) == pytest.approx(0.25)
        assert relaxed_cv_bound(spec, [1, 1], 0) == pytest.approx(2.0)
        assert relaxed_cv_bound(spec, [1, 1], 10_000) == pytest.approx(0.25)

    def test_preconditions(self):
        spec = ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), eta=0.3)
        with pytest.raises(PreconditionError, match="1/\\(2L\\+M\\)"):
            exact_cv_bound(spec, [1, 1], 1)
        with pytest.raises(PreconditionError, match="1/\\(2L\\)"):
            relaxed_cv_bound(spec, [1, 1], 1)
        relaxed = ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), B_tilde=np.zeros((2, 2)),
                                    eta=0.1)
        with pytest.raises(PreconditionError):
            exact_cv_bound(relaxed, [1, 1], 1)

    def test_override_and_vacuous_warning(self):
        spec = ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), B_tilde=0.5 * np.eye(2),
                                 eta=1e-9, M=1.0)
        assert spec.M == 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            exact_cv_bound(spec, [1, 1], 3)
        flat = ControlledQuadratic(QuadraticSpec(np.eye(1) * 1e-300, [0.0], [[1.0]]), [[1.0]], 0.1)
        with pytest.warns(VacuousBoundWarning):
            exact_cv_bound(flat, [1.0], 2)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), B_tilde=np.eye(3))


class TestTrajectories:
    def test_deterministic_matches_closed_form(self):
        spec = ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), eta=0.125)
        traj = run_controlled_sgd(spec, [1.0, 1.0], 50, seeds=10)
        t = np.arange(51)
        np.testing.assert_allclose(traj.mean_sq_dist, (7 / 8) ** (2 * t) + (3 / 4) ** (2 * t),
                                   rtol=1e-12)
        assert np.all(traj.std_err == 0)

    def test_stochastic_matches_moment_oracle(self):
        spec = ControlledQuadratic.build(H2, [0.5, -1.0], np.eye(2), B_tilde=0.5 * np.eye(2),
                                 eta=0.125)
        traj = run_controlled_sgd(spec, [1.0, 1.0], 60, seeds=2000, base_seed=3)
        exact = second_moment_oracle(spec, [1.0, 1.0], 60)
        z = (traj.mean_sq_dist[1:] - exact[1:]) / traj.std_err[1:]
        assert np.max(np.abs(z)) < 4.5

    def test_stationary_closed_form(self):
        spec = ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), B_tilde=0.5 * np.eye(2),
                                 eta=0.125)
        oracle = second_moment_oracle(spec, spec.theta_star, 2000)[-1]
        assert stationary_mean_sq(spec) == pytest.approx(oracle, rel=1e-10)
        # 1/64 * 1/4 * (1/(1 - 49/64) + 1/(1 - 9/16))
        assert stationary_mean_sq(spec) == pytest.approx(0.0255952380952, rel=1e-10)
        with pytest.raises(ValueError):
            stationary_mean_sq(ControlledQuadratic.build([[2.0, 0.5], [0.5, 1.0]], np.zeros(2),
                                                 np.eye(2), B_tilde=np.zeros((2, 2))))

    def test_reproducible_and_seed_sensitive(self):
        spec = ControlledQuadratic.build(H2, np.zeros(2), np.eye(2), B_tilde=np.zeros((2, 2)),
                                 eta=0.1)
        a = run_controlled_sgd(spec, [1, 1], 20, 5, base_seed=1).mean_sq_dist
        b = run_controlled_sgd(spec, [1, 1], 20, 5, base_seed=1).mean_sq_dist
        c = run_controlled_sgd(spec, [1, 1], 20, 5, base_seed=2).mean_sq_dist
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        with pytest.raises(ValueError):
            run_controlled_sgd(spec, [1, 1], 0, 5)


class TestCocoercivity:
    def test_no_violation_and_tight_direction(self):
        spec = random_quadratic_spec(substream(0, "lemma"), 3, 2)
        rep = verify_cocoercivity(spec, 50, rng=0)
        assert rep.probes == 50
        assert rep.max_violation <= 1e-10
        assert rep.max_lhs > 0

    def test_equality_along_top_eigenvector(self):
        # Along the top eigenvector of H both sides coincide: |3 e2|^2 / (2*3) = 0.5 * 3.
        spec = QuadraticSpec(np.diag([1.0, 3.0]), np.zeros(2), np.eye(2))
        theta = np.array([0.0, 1.0])
        eps = substream(0, "eq").standard_normal((5, 2))
        gap = spec.value(eps, theta) - spec.value(eps, spec.theta_star)
        np.testing.assert_allclose(gap, 1.5 - eps @ spec.B_mat.T @ theta)
        rep = verify_cocoercivity(spec, 1, rng=0)  # probe 0 sits at theta*
        assert rep.max_violation == 0.0 and rep.max_lhs == 0.0
