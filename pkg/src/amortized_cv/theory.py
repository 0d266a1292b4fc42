"""Synthetic checks of the linear-rate and noise-floor bounds for controlled SGD.

The instances are single quadratics ``f(eps, theta)`` with control term
``c(eps, theta) = -B_tilde eps``, so the controlled gradient is
``H theta - b - (B - B_tilde) eps``. Run with batch 1, N = 1 and plain SGD.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .models import QuadraticSpec, quad_per_datum_grad
from .noise_basis import gaussian_expectation, substream


class PreconditionError(ValueError):
    pass


class VacuousBoundWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ControlledQuadratic:
    quadratic: QuadraticSpec
    B_tilde: np.ndarray
    eta: float
    M_override: float | None = None

    def __post_init__(self):
        Bt = np.atleast_2d(np.asarray(self.B_tilde, dtype=float))
        if Bt.shape != self.quadratic.B_mat.shape:
            raise ValueError(f"B_tilde {Bt.shape} must match B_mat {self.quadratic.B_mat.shape}")
        object.__setattr__(self, "B_tilde", Bt)

    @classmethod
    def build(cls, H_mat, b_vec, B_mat, B_tilde=None, eta=0.1, M=None):
        spec = QuadraticSpec(H_mat, b_vec, B_mat)
        if B_tilde is None:
            B_tilde = spec.B_mat
        return cls(spec, B_tilde, float(eta), M)

    @property
    def L(self):
        return self.quadratic.L

    @property
    def H(self):
        return self.quadratic.H

    @property
    def theta_star(self):
        return self.quadratic.theta_star

    @property
    def residual_coupling(self):
        return self.quadratic.B_mat - self.B_tilde

    @property
    def M_bar(self):
        """``E|grad f(eps, theta*) - c(eps, theta)|^2 = |B - B_tilde|_F^2``."""
        R = self.residual_coupling
        return float(np.sum(R * R))

    @property
    def M(self):
        # E|grad f(eps, theta*) - c|^2 is the constant M_bar, which is only
        # bounded by M * (f gap) for every theta when it is zero.
        if self.M_override is not None:
            return float(self.M_override)
        return 0.0 if self.M_bar == 0.0 else math.inf

    @property
    def rate(self):
        return 1.0 - self.eta * self.H * (1.0 - self.eta * (2.0 * self.L + self.M))

    @property
    def rate_bar(self):
        return 1.0 - self.eta * self.H * (1.0 - 2.0 * self.L * self.eta)


def _dist0(spec, theta0):
    d = np.asarray(theta0, dtype=float) - spec.theta_star
    return float(d @ d)


def exact_cv_bound(spec, theta0, t):
    """``c^t |theta0 - theta*|^2``; requires ``eta <= 1 / (2L + M)``."""
    limit = 1.0 / (2.0 * spec.L + spec.M)
    if spec.eta > limit:
        raise PreconditionError(
            f"eta={spec.eta} exceeds the step-size bound 1/(2L+M)={limit}")
    c = spec.rate
    if c >= 1.0:
        warnings.warn(f"rate c={c} >= 1: bound is vacuous", VacuousBoundWarning, stacklevel=2)
    return c ** t * _dist0(spec, theta0)


def relaxed_cv_bound(spec, theta0, t):
    """``cbar^t |theta0 - theta*|^2 + 2 eta^2 Mbar (1 - cbar^t) / (1 - cbar)``."""
    limit = 1.0 / (2.0 * spec.L)
    if spec.eta > limit:
        raise PreconditionError(
            f"eta={spec.eta} exceeds the step-size bound 1/(2L)={limit}")
    cb = spec.rate_bar
    if cb >= 1.0:
        warnings.warn(f"rate cbar={cb} >= 1: bound is vacuous", VacuousBoundWarning, stacklevel=2)
        floor = 2.0 * spec.eta ** 2 * spec.M_bar * t
    else:
        floor = 2.0 * spec.eta ** 2 * spec.M_bar * (1.0 - cb ** t) / (1.0 - cb)
    return cb ** t * _dist0(spec, theta0) + floor


def noise_floor(spec):
    return 2.0 * spec.eta ** 2 * spec.M_bar / (1.0 - spec.rate_bar)


@dataclass(frozen=True)
class Trajectory:
    mean_sq_dist: np.ndarray  # [T + 1], entry t is E|theta_t - theta*|^2
    std_err: np.ndarray
    seeds: int


def run_controlled_sgd(spec, theta0, T, seeds, base_seed=0):
    """Seed-averaged ``|theta_t - theta*|^2`` for controlled SGD.

    Seed ``s`` draws all of its noise from the substream ``(base_seed, s)``;
    the across-seed mean uses ``math.fsum`` so it does not depend on the
    order replicates are merged.
    """
    if T < 1 or seeds < 1:
        raise ValueError("T and seeds must be >= 1")
    q = spec.quadratic
    R = spec.residual_coupling
    theta_star = q.theta_star
    theta0 = np.asarray(theta0, dtype=float)
    deterministic = not np.any(R)
    n_runs = 1 if deterministic else seeds
    noise = None
    if not deterministic:
        noise = np.stack([substream(base_seed, "theory", s).standard_normal((T, q.D))
                          for s in range(seeds)])
    theta = np.tile(theta0, (n_runs, 1))
    sq = np.empty((T + 1, n_runs))
    d = theta - theta_star
    sq[0] = np.einsum("ij,ij->i", d, d)
    for t in range(1, T + 1):
        grad = theta @ q.H_mat.T - q.b_vec
        if noise is not None:
            grad = grad - noise[:, t - 1, :] @ R.T
        theta = theta - spec.eta * grad
        d = theta - theta_star
        sq[t] = np.einsum("ij,ij->i", d, d)
    if deterministic:
        return Trajectory(sq[:, 0].copy(), np.zeros(T + 1), seeds)
    mean = np.array([math.fsum(row) / n_runs for row in sq])
    se = sq.std(axis=1, ddof=1) / math.sqrt(n_runs) if n_runs > 1 else np.zeros(T + 1)
    return Trajectory(mean, se, seeds)


def stationary_mean_sq(spec):
    """Closed-form stationary ``E|theta - theta*|^2`` when H is diagonal."""
    q = spec.quadratic
    if not np.allclose(q.H_mat, np.diag(np.diag(q.H_mat))):
        raise ValueError("closed form needs a diagonal H_mat")
    h = np.diag(q.H_mat)
    R = spec.residual_coupling
    noise_var = spec.eta ** 2 * np.sum(R * R, axis=1)
    return float(np.sum(noise_var / (1.0 - (1.0 - spec.eta * h) ** 2)))


@dataclass(frozen=True)
class CocoercivityReport:
    probes: int
    max_violation: float
    max_lhs: float


def verify_cocoercivity(spec, probes, rng=None, order=8):
    """Check ``E|grad f(theta) - grad f(theta*)|^2 / 2L <= E[f(theta) - f(theta*)]``.

    Expectations over eps use Gauss-Hermite quadrature.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(rng)
    q = spec.quadratic if isinstance(spec, ControlledQuadratic) else spec
    theta_star = q.theta_star
    L = q.L
    worst = -math.inf
    worst_lhs = 0.0
    for k in range(probes):
        theta = theta_star if k == 0 else theta_star + rng.standard_normal(q.P) * rng.uniform(0.1, 3.0)

        def gap_and_grad(nodes, theta=theta):
            f_gap = q.value(nodes, theta) - q.value(nodes, theta_star)
            dg = quad_per_datum_grad(q, nodes, theta) - quad_per_datum_grad(q, nodes, theta_star)
            return np.column_stack([f_gap, np.sum(dg * dg, axis=1)])

        rhs, sq = gaussian_expectation(gap_and_grad, q.D, order)
        lhs = sq / (2.0 * L)
        if lhs - rhs > worst:
            worst = lhs - rhs
        worst_lhs = max(worst_lhs, lhs)
    return CocoercivityReport(probes, float(worst), float(worst_lhs))
