"""Training objectives for coefficient providers and their exact gradients.

Each objective estimates ``Tr Cov[G~]`` up to terms that do not depend on the
coefficients, so values are only comparable for a fixed ``(theta, batch)``.
All three sum over the batch and over parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("partial_gradients", "gradient_sum", "squared_difference")


@dataclass(frozen=True)
class ObjectiveEvaluation:
    value: float
    d_coeff: np.ndarray  # [batch, P, K*D]
    kind: str


def _prepare(grads, basis, coeffs):
    w = getattr(basis, "w", basis)
    g = np.asarray(grads, dtype=float)
    w = np.asarray(w, dtype=float)
    c = np.asarray(coeffs, dtype=float)
    # S > 1: average samples upstream of the objective.
    if w.ndim == 3:
        w = w.mean(axis=1)
    if c.ndim != 3 or w.ndim != 2 or c.shape[0] != w.shape[0] or c.shape[2] != w.shape[1]:
        raise ValueError(f"shape mismatch: coeffs {c.shape}, basis {w.shape}")
    return g, w, c


def _cv_terms(c, w):
    return np.einsum("bpf,bf->bp", c, w)


def partial_gradients_objective(per_datum_grads, basis, coeffs):
    g, w, c = _prepare(per_datum_grads, basis, coeffs)
    if g.ndim == 3:
        g = g.mean(axis=1)
    if g.shape != c.shape[:2]:
        raise ValueError(f"shape mismatch: grads {g.shape}, coeffs {c.shape}")
    cw = _cv_terms(c, w)
    value = np.sum(cw * cw - 2.0 * g * cw)
    d = 2.0 * (cw - g)[:, :, None] * w[:, None, :]
    return ObjectiveEvaluation(float(value), d, "partial_gradients")


def gradient_sum_objective(G_hat, basis, coeffs):
    G, w, c = _prepare(G_hat, basis, coeffs)
    if G.shape != (c.shape[1],):
        raise ValueError(f"shape mismatch: G_hat {G.shape}, coeffs {c.shape}")
    cw = _cv_terms(c, w)
    value = np.sum(cw * cw - 2.0 * G[None, :] * cw)
    d = 2.0 * (cw - G[None, :])[:, :, None] * w[:, None, :]
    return ObjectiveEvaluation(float(value), d, "gradient_sum")


def squared_difference_objective(G_hat, basis, coeffs):
    G, w, c = _prepare(G_hat, basis, coeffs)
    if G.shape != (c.shape[1],):
        raise ValueError(f"shape mismatch: G_hat {G.shape}, coeffs {c.shape}")
    resid = G - _cv_terms(c, w).sum(axis=0)
    d = -2.0 * resid[None, :, None] * w[:, None, :]
    return ObjectiveEvaluation(float(resid @ resid), d, "squared_difference")


def evaluate_objective(kind, per_datum_grads, basis, coeffs):
    """Dispatch on ``kind`` given per-datum gradients ``[batch, P]`` or ``[batch, S, P]``."""
    g = np.asarray(per_datum_grads, dtype=float)
    if g.ndim == 3:
        g = g.mean(axis=1)
    if kind == "partial_gradients":
        return partial_gradients_objective(g, basis, coeffs)
    if kind == "gradient_sum":
        return gradient_sum_objective(g.sum(axis=0), basis, coeffs)
    if kind == "squared_difference":
        return squared_difference_objective(g.sum(axis=0), basis, coeffs)
    raise ValueError(f"unknown objective {kind!r}; expected one of {KINDS}")
