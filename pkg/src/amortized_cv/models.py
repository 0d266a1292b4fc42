"""Doubly stochastic objectives with analytic per-datum pathwise gradients.

Every model exposes the same duck-typed surface:

* ``N``, ``P`` (parameter count), ``noise_dim``, ``context_dim``
* ``per_datum_values(theta, idx, eps)`` -> ``[batch, S]``
* ``per_datum_grads(theta, idx, eps)`` -> ``[batch, S, P]``
* ``contexts(idx)`` -> ``[batch, context_dim]``
* ``initial_theta()`` and ``nelbo_estimate(theta, samples, rng)``

``eps`` always has shape ``[batch, S, noise_dim]``. The full objective is
``sum_n E[f_n(eps, theta)]``; ``(N / (|B| S)) * sum_b sum_s f_b`` is an
unbiased estimate of it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .noise_basis import InvalidCholeskyError


class InvalidLabelError(ValueError):
    pass


def _check_eps(eps, batch, noise_dim):
    eps = np.asarray(eps, dtype=float)
    if eps.ndim == 2:
        eps = eps[:, None, :]
    if eps.ndim != 3 or eps.shape[0] != batch or eps.shape[2] != noise_dim:
        raise ValueError(f"noise must be [{batch}, S, {noise_dim}], got {eps.shape}")
    return eps


# --------------------------------------------------------------------------
# Quadratic family
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSpec:
    """``f(eps, theta) = 0.5 theta'H theta - theta'(b + B eps)``.

    The gradient ``H theta - b - B eps`` is affine in the noise, which makes
    the optimal linear control variate exact (coefficients ``-B``).
    """

    H_mat: np.ndarray
    b_vec: np.ndarray
    B_mat: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H_mat, dtype=float))
        b = np.atleast_1d(np.asarray(self.b_vec, dtype=float))
        B = np.atleast_2d(np.asarray(self.B_mat, dtype=float))
        if H.shape != (b.size, b.size) or B.shape[0] != b.size:
            raise ValueError(f"inconsistent shapes H{H.shape} b{b.shape} B{B.shape}")
        if not np.allclose(H, H.T):
            raise ValueError("H_mat must be symmetric")
        if np.linalg.eigvalsh(H).min() <= 0.0:
            raise ValueError("H_mat must be positive definite")
        object.__setattr__(self, "H_mat", H)
        object.__setattr__(self, "b_vec", b)
        object.__setattr__(self, "B_mat", B)

    @property
    def P(self):
        return self.b_vec.size

    @property
    def D(self):
        return self.B_mat.shape[1]

    @property
    def theta_star(self):
        return np.linalg.solve(self.H_mat, self.b_vec)

    @property
    def L(self):
        return float(np.linalg.eigvalsh(self.H_mat).max())

    @property
    def H(self):
        return float(np.linalg.eigvalsh(self.H_mat).min())

    def value(self, eps, theta):
        eps = np.asarray(eps, dtype=float)
        theta = np.asarray(theta, dtype=float)
        lin = self.b_vec + eps @ self.B_mat.T
        return 0.5 * theta @ self.H_mat @ theta - lin @ theta


def quad_per_datum_grad(spec, eps, theta):
    """``H theta - b - B eps``; ``eps`` may carry leading batch axes."""
    eps = np.asarray(eps, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if eps.shape[-1] != spec.D or theta.shape[-1] != spec.P:
        raise ValueError(
            f"expected eps[..., {spec.D}] and theta[..., {spec.P}], "
            f"got {eps.shape} and {theta.shape}")
    return theta @ spec.H_mat.T - spec.b_vec - eps @ spec.B_mat.T


def random_quadratic_spec(rng, P, D, eig_range=(0.5, 3.0), noise_scale=1.0):
    Q, _ = np.linalg.qr(rng.standard_normal((P, P)))
    eig = rng.uniform(*eig_range, size=P)
    H = (Q * eig) @ Q.T
    H = 0.5 * (H + H.T)
    return QuadraticSpec(H, rng.standard_normal(P), noise_scale * rng.standard_normal((P, D)))


class QuadraticModel:
    """A data set of quadratic terms whose noise coupling depends on context.

    Datum ``n`` has ``f_n = 0.5 theta'H theta - theta'(b_n + B_n eps)`` with
    ``B_n = sum_k y_nk A_k`` linear in its context ``y_n``, so the per-datum
    optimal coefficients are a linear function of the context.
    """

    def __init__(self, H_mat, b_vecs, B_mats, context):
        self.H_mat = np.asarray(H_mat, dtype=float)
        self.b_vecs = np.asarray(b_vecs, dtype=float)
        self.B_mats = np.asarray(B_mats, dtype=float)
        self._context = np.asarray(context, dtype=float)
        self.N, self.P = self.b_vecs.shape
        self.noise_dim = self.B_mats.shape[2]
        self.context_dim = self._context.shape[1]
        if self.B_mats.shape[:2] != (self.N, self.P) or self.H_mat.shape != (self.P, self.P):
            raise ValueError("inconsistent quadratic model shapes")

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.H_mat, spec.b_vec[None], spec.B_mat[None], np.ones((1, 1)))

    @classmethod
    def random(cls, rng, N=100, P=3, D=2, context_dim=2):
        spec = random_quadratic_spec(rng, P, D)
        A = rng.standard_normal((context_dim, P, D))
        context = rng.standard_normal((N, context_dim))
        B = np.einsum("nk,kpd->npd", context, A)
        b = rng.standard_normal((N, P)) / N
        return cls(spec.H_mat / N, b, B, context)

    @property
    def theta_star(self):
        return np.linalg.solve(self.N * self.H_mat, self.b_vecs.sum(axis=0))

    def initial_theta(self):
        return np.zeros(self.P)

    def contexts(self, idx):
        return self._context[np.asarray(idx)]

    def jacobians(self, idx):
        """Exact noise Jacobians ``d g_b / d eps = -B_b`` of shape [batch, P, D]."""
        return -self.B_mats[np.asarray(idx)]

    def per_datum_values(self, theta, idx, eps):
        idx = np.asarray(idx)
        eps = _check_eps(eps, idx.size, self.noise_dim)
        theta = np.asarray(theta, dtype=float)
        noise = np.einsum("bpd,bsd->bsp", self.B_mats[idx], eps)
        lin = self.b_vecs[idx][:, None, :] + noise
        return 0.5 * theta @ self.H_mat @ theta - lin @ theta

    def per_datum_grads(self, theta, idx, eps):
        idx = np.asarray(idx)
        eps = _check_eps(eps, idx.size, self.noise_dim)
        theta = np.asarray(theta, dtype=float)
        noise = np.einsum("bpd,bsd->bsp", self.B_mats[idx], eps)
        return (self.H_mat @ theta)[None, None, :] - self.b_vecs[idx][:, None, :] - noise

    def expected_objective(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.N * 0.5 * theta @ self.H_mat @ theta - self.b_vecs.sum(axis=0) @ theta

    def nelbo_estimate(self, theta, samples, rng):
        if samples < 1:
            raise ValueError("noise_samples must be >= 1")
        idx = np.arange(self.N)
        eps = rng.standard_normal((self.N, samples, self.noise_dim))
        return float(self.per_datum_values(theta, idx, eps).mean(axis=1).sum())


# --------------------------------------------------------------------------
# Bayesian logistic regression
# --------------------------------------------------------------------------


def gaussian_kl(m, chol_lower):
    """KL(N(m, LL') || N(0, I))."""
    m = np.asarray(m, dtype=float)
    L = np.asarray(chol_lower, dtype=float)
    diag = np.diag(L)
    if np.any(diag <= 0.0):
        raise InvalidCholeskyError("Cholesky factor needs a strictly positive diagonal")
    return 0.5 * (np.sum(L * L) + m @ m - m.size - 2.0 * np.sum(np.log(diag)))


class LogisticRegressionModel:
    """Bayesian logistic regression with a full-covariance Gaussian posterior.

    ``theta = [m, l]`` where ``m`` is the posterior mean and ``l`` holds the
    lower triangle of the Cholesky factor in ``np.tril_indices`` order, with
    the diagonal stored as logs. Each datum carries ``1/N`` of the KL to the
    unit Gaussian prior, so ``sum_n E f_n`` is the full NELBO.

    ``context`` defaults to the features with the label appended.
    """

    def __init__(self, features, labels, kl_scale=None, context=None):
        self.X = np.asarray(features, dtype=float)
        self.y = np.asarray(labels, dtype=float)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"features {self.X.shape} and labels {self.y.shape} disagree")
        if not np.all((self.y == 0.0) | (self.y == 1.0)):
            raise InvalidLabelError("labels must be 0 or 1")
        self.N, self.D = self.X.shape
        self.noise_dim = self.D
        self.P = self.D + self.D * (self.D + 1) // 2
        self._tril = np.tril_indices(self.D)
        self._diag_pos = np.flatnonzero(self._tril[0] == self._tril[1])
        # 1/N by default; N=inf turns the KL off.
        self.kl_scale = 1.0 / self.N if kl_scale is None else float(kl_scale)
        if context is None:
            context = np.hstack([self.X, self.y[:, None]])
        self._context = np.asarray(context, dtype=float)
        if self._context.shape[0] != self.N:
            raise ValueError("need one context row per datum")
        self.context_dim = self._context.shape[1]

    # -- parameter layout ---------------------------------------------------

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.P,):
            raise ValueError(f"theta must have length {self.P}, got {theta.shape}")
        m = theta[: self.D]
        raw = theta[self.D:].copy()
        raw[self._diag_pos] = np.exp(raw[self._diag_pos])
        L = np.zeros((self.D, self.D))
        L[self._tril] = raw
        return m, L

    def pack(self, m, chol_lower):
        L = np.asarray(chol_lower, dtype=float)
        if np.any(np.diag(L) <= 0.0):
            raise InvalidCholeskyError("Cholesky factor needs a strictly positive diagonal")
        raw = L[self._tril].copy()
        raw[self._diag_pos] = np.log(raw[self._diag_pos])
        return np.concatenate([np.asarray(m, dtype=float), raw])

    def initial_theta(self):
        return np.zeros(self.P)

    def contexts(self, idx):
        return self._context[np.asarray(idx)]

    # -- objective ------------------------------------------------------------

    def _logits(self, theta, idx, eps):
        m, L = self.unpack(theta)
        w = m + eps @ L.T  # [b, s, D]
        return np.einsum("bsd,bd->bs", w, self.X[idx]), m, L

    def per_datum_values(self, theta, idx, eps):
        idx = np.asarray(idx)
        eps = _check_eps(eps, idx.size, self.D)
        z, m, L = self._logits(theta, idx, eps)
        nll = np.logaddexp(0.0, z) - self.y[idx][:, None] * z
        kl = gaussian_kl(m, L) if self.kl_scale else 0.0
        return nll + self.kl_scale * kl

    def per_datum_grads(self, theta, idx, eps):
        idx = np.asarray(idx)
        eps = _check_eps(eps, idx.size, self.D)
        z, m, L = self._logits(theta, idx, eps)
        x = self.X[idx]
        r = expit(z) - self.y[idx][:, None]  # [b, s]
        g_m = r[..., None] * x[:, None, :] + self.kl_scale * m
        # dNLL/dL_jk = r x_j eps_k, restricted to the lower triangle.
        rows, cols = self._tril
        g_L = r[..., None] * x[:, None, rows] * eps[..., cols]
        g_L = g_L + self.kl_scale * L[self._tril]
        diag = np.diag(L)
        g_L[..., self._diag_pos] -= self.kl_scale / diag
        g_L[..., self._diag_pos] *= diag  # chain rule through the log-diagonal
        return np.concatenate([g_m, g_L], axis=-1)

    def kl(self, theta):
        return gaussian_kl(*self.unpack(theta))

    def nelbo_estimate(self, theta, samples, rng):
        """Full-data NELBO with ``samples`` Monte Carlo draws per datum.

        Each NLL term only sees the scalar logit ``x'w``, which is
        ``N(x'm, |L'x|^2)`` under the posterior, so the logits are sampled
        directly; this has the same distribution as sampling ``w``.
        """
        if samples < 1:
            raise ValueError("noise_samples must be >= 1")
        m, L = self.unpack(theta)
        loc = self.X @ m
        scale = np.linalg.norm(self.X @ L, axis=1)
        xi = rng.standard_normal((samples, self.N))
        z = loc + scale * xi
        nll = np.logaddexp(0.0, z) - self.y * z
        return float(nll.mean(axis=0).sum() + self.N * self.kl_scale * gaussian_kl(m, L))


def nelbo_estimate(model, theta, noise_samples, rng=None):
    """Full-data Monte Carlo NELBO ``sum_n E[NLL_n] + KL``."""
    rng = np.random.default_rng(rng)
    return model.nelbo_estimate(theta, noise_samples, rng)


def logreg_per_datum_grad(x, y, eps, theta, N):
    """Pathwise gradient of one datum's ``NLL + KL / N`` at fixed ``eps``."""
    if y not in (0, 1, 0.0, 1.0):
        raise InvalidLabelError(f"label must be 0 or 1, got {y}")
    model = LogisticRegressionModel(np.atleast_2d(x), np.array([float(y)]),
                                    kl_scale=0.0 if np.isinf(N) else 1.0 / N)
    eps = np.asarray(eps, dtype=float).reshape(1, 1, -1)
    return model.per_datum_grads(theta, [0], eps)[0, 0]
