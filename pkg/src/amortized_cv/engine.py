"""Controlled gradient assembly, optimizers and the alternating training step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise_basis import eval_basis
from .objectives import evaluate_objective


class InvalidBatchError(ValueError):
    pass


@dataclass(frozen=True)
class ControlledGradient:
    g_tilde: np.ndarray
    g_hat: np.ndarray
    cv_term: np.ndarray


def controlled_gradient(per_datum_grads, basis, coeffs, scale=1.0):
    """Subtract per-datum control variates and apply the gradient scaling.

    Args:
      per_datum_grads: ``[batch, S, P]`` (or ``[batch, P]`` for S=1).
      basis: ``BasisEval`` or array ``[batch, S, F]`` (or ``[batch, F]``).
      coeffs: ``[batch, P, F]``, shared by all S samples of a datum.
      scale: typically ``N / (|B| S)``.
    """
    g = np.asarray(per_datum_grads, dtype=float)
    w = np.asarray(getattr(basis, "w", basis), dtype=float)
    c = np.asarray(coeffs, dtype=float)
    if g.ndim == 2:
        g = g[:, None, :]
    if w.ndim == 2:
        w = w[:, None, :]
    if (g.shape[:2] != w.shape[:2] or c.shape[0] != g.shape[0]
            or c.shape[1] != g.shape[2] or c.shape[2] != w.shape[2]):
        raise ValueError(f"shape mismatch: grads {g.shape}, basis {w.shape}, coeffs {c.shape}")
    g_hat = scale * g.sum(axis=(0, 1))
    cv_term = scale * np.einsum("bpf,bsf->p", c, w)
    return ControlledGradient(g_hat - cv_term, g_hat, cv_term)


def sgd_step(theta, gradient, lr):
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return np.asarray(theta, dtype=float) - lr * np.asarray(gradient, dtype=float)


class SGD:
    kind = "sgd"

    def __init__(self, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        return sgd_step(params, grad, self.lr)


class Adam:
    """Adam with bias-corrected moments and the usual default betas."""

    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grad):
        grad = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return np.asarray(params, dtype=float) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind, lr):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass(frozen=True)
class StepReport:
    objective: float
    g_hat_norm: float
    g_tilde_norm: float
    theta: np.ndarray
    g_tilde: np.ndarray


def alternating_step(model, theta, provider, objective, model_opt, coeff_opt, batch,
                     rng, order=1, num_samples=1):
    """One joint step: update the coefficient provider, then the model.

    The noise is drawn once. The provider objective is evaluated at the
    current coefficients; the controlled gradient then uses the coefficients
    produced by the updated provider on the same gradient sample. With
    ``provider=None`` this is a plain uncontrolled step.

    Returns ``(theta_new, StepReport)``.
    """
    batch = np.asarray(batch)
    if batch.size == 0:
        raise InvalidBatchError("mini-batch must be non-empty")
    eps = rng.standard_normal((batch.size, num_samples, model.noise_dim))
    grads = model.per_datum_grads(theta, batch, eps)
    basis = eval_basis(eps, order)
    scale = model.N / (batch.size * num_samples)
    obj_value = float("nan")
    if provider is None:
        coeffs = np.zeros((batch.size, model.P, basis.w.shape[-1]))
    else:
        contexts = model.contexts(batch)
        coeffs, cache = provider.forward(contexts)
        if coeff_opt is not None and objective is not None:
            ev = evaluate_objective(objective, grads, basis, coeffs)
            obj_value = ev.value
            provider.params = coeff_opt.step(provider.params, provider.backward(cache, ev.d_coeff))
            coeffs = provider.coefficients(contexts)
    cg = controlled_gradient(grads, basis, coeffs, scale)
    theta_new = model_opt.step(theta, cg.g_tilde)
    report = StepReport(obj_value, float(np.linalg.norm(cg.g_hat)),
                        float(np.linalg.norm(cg.g_tilde)), theta_new, cg.g_tilde)
    return theta_new, report
