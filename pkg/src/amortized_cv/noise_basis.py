"""Base randomness, centered polynomial basis features and Gaussian quadrature."""
from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field

import numpy as np

MAX_ORDER = 3

# Var[eps], Var[eps^2 - 1], Var[eps^3] under N(0, 1).
FEATURE_VARIANCES = (1.0, 2.0, 15.0)


class UnsupportedOrderError(ValueError):
    pass


class InvalidCholeskyError(ValueError):
    pass


def substream(seed, *keys):
    """Independent generator for ``(seed, *keys)``.

    String keys are hashed with crc32 so the derivation is stable across
    processes and Python versions.
    """
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        entropy.append(int(key))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class NoiseDraw:
    epsilon: np.ndarray  # [batch, S, D]
    seed: int | None = None
    batch_indices: tuple = field(default=())

    @property
    def shape(self):
        return self.epsilon.shape


@dataclass(frozen=True)
class BasisEval:
    w: np.ndarray  # [batch, S, K*D]
    order: int


def sample_noise(seed, batch_size, num_samples, noise_dim, batch_indices=()):
    """Draw i.i.d. standard normal noise of shape ``[batch, S, D]``.

    ``seed`` may be an integer or an existing ``np.random.Generator``; in the
    latter case the generator is advanced.
    """
    for name, n in (("batch_size", batch_size), ("num_samples", num_samples),
                    ("noise_dim", noise_dim)):
        if int(n) < 1:
            raise ValueError(f"{name} must be >= 1, got {n}")
    if isinstance(seed, np.random.Generator):
        rng, seed_value = seed, None
    else:
        rng, seed_value = np.random.default_rng(int(seed)), int(seed)
    eps = rng.standard_normal((batch_size, num_samples, noise_dim))
    return NoiseDraw(eps, seed_value, tuple(int(i) for i in batch_indices))


def eval_basis(noise, order):
    """Centered power basis ``[eps, eps^2 - 1, eps^3][:order]`` per dimension.

    Features are concatenated along the last axis by ascending power, so for
    ``D`` noise dimensions the output has ``order * D`` columns.
    """
    if order not in (1, 2, 3):
        raise UnsupportedOrderError(f"basis order must be 1, 2 or 3, got {order}")
    eps = noise.epsilon if isinstance(noise, NoiseDraw) else np.asarray(noise, dtype=float)
    feats = [eps]
    if order >= 2:
        feats.append(eps * eps - 1.0)
    if order >= 3:
        feats.append(eps * eps * eps)
    return BasisEval(np.concatenate(feats, axis=-1), order)


def reparameterize(mu, chol_lower, noise):
    """Return ``mu + L @ eps`` for every draw in ``noise``."""
    mu = np.asarray(mu, dtype=float)
    chol = np.asarray(chol_lower, dtype=float)
    if chol.ndim != 2 or chol.shape[0] != chol.shape[1]:
        raise InvalidCholeskyError(f"Cholesky factor must be square, got {chol.shape}")
    if np.any(np.diag(chol) <= 0.0):
        raise InvalidCholeskyError("Cholesky factor needs a strictly positive diagonal")
    if np.any(np.triu(chol, 1) != 0.0):
        raise InvalidCholeskyError("Cholesky factor must be lower triangular")
    eps = noise.epsilon if isinstance(noise, NoiseDraw) else np.asarray(noise, dtype=float)
    if eps.shape[-1] != chol.shape[0]:
        raise ValueError(f"noise dim {eps.shape[-1]} != factor dim {chol.shape[0]}")
    return mu + eps @ chol.T


def gauss_hermite(order, dim=1):
    """Tensor-product Gauss-Hermite rule for ``N(0, I_dim)``.

    Returns nodes ``[n**dim, dim]`` and weights summing to one.
    """
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.array([np.prod(c) for c in itertools.product(w, repeat=dim)])
    return nodes, weights


def gaussian_expectation(func, dim, order=40):
    """E[func(eps)] for eps ~ N(0, I_dim) by Gauss-Hermite quadrature.

    ``func`` receives nodes of shape ``[n, dim]`` and returns an array whose
    leading axis is ``n``.
    """
    nodes, weights = gauss_hermite(order, dim)
    vals = np.asarray(func(nodes), dtype=float)
    return np.tensordot(weights, vals, axes=(0, 0))
