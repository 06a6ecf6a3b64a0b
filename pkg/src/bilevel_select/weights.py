"""Data weights: explicit softmax weights for selection and LSE implicit weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInputError

__all__ = [
    "WeightState",
    "softmax_weights",
    "softmax_weight_grad",
    "pbgd_omega_update",
    "lse_implicit_weights",
    "bmo_omega_track",
    "removal_threshold",
]


def _finite_vector(v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError(f"{name} must be a nonempty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return v


def softmax_weights(omega):
    omega = _finite_vector(omega, "weight logits")
    e = np.exp(omega - omega.max())
    return e / e.sum()


def softmax_weight_grad(omega, i):
    """Gradient of the i-th softmax weight: ``sigma_i * (delta_ij - sigma_j)``."""
    sigma = softmax_weights(omega)
    if not 0 <= i < sigma.shape[0]:
        raise IndexError(f"weight index {i} out of range for {sigma.shape[0]} samples")
    g = -sigma[i] * sigma
    g[i] += sigma[i]
    return g


@dataclass(frozen=True, eq=False)
class WeightState:
    """Weight logits with their softmax cached.  Immutable; updates return new states."""

    logits: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_logits(cls, logits):
        logits = np.array(_finite_vector(logits, "weight logits"))
        weights = softmax_weights(logits)
        logits.setflags(write=False)
        weights.setflags(write=False)
        return cls(logits, weights)

    @classmethod
    def uniform(cls, n):
        return cls.from_logits(np.zeros(n))

    @property
    def N(self):
        return self.logits.shape[0]


def pbgd_omega_update(w, i_k, C, alpha, gamma, scale=1.0):
    """One penalty-gradient step on the weight logits for sample ``i_k``.

    ``omega' = omega - alpha * gamma * scale * C * grad sigma_{i_k}(omega)``.
    ``C`` is the (nonnegative) SFT loss of the selected sample after the
    parameter step.  With ``C > 0`` the selected logit decreases and every
    other logit increases.
    """
    if not C >= 0:
        raise InvalidInputError(f"weight-update coefficient must be >= 0, got {C}")
    if not (alpha >= 0 and gamma >= 0):
        raise InvalidInputError("step size and penalty must be nonnegative")
    step = (alpha * gamma * scale * C) * softmax_weight_grad(w.logits, i_k)
    return WeightState.from_logits(w.logits - step)


def lse_implicit_weights(losses, tau=1.0):
    """``softmax(-tau * losses)``: the weights the LSE surrogate assigns."""
    if not tau > 0:
        raise InvalidInputError(f"LSE temperature must be positive, got {tau}")
    losses = _finite_vector(losses, "losses")
    if np.any(losses < 0):
        raise InvalidInputError("losses must be nonnegative")
    s = -tau * losses
    return np.exp(s - logsumexp(s))


def bmo_omega_track(omega_i, loss_i, alpha, tau=1.0):
    """Tracker step ``omega_i - alpha * (omega_i + tau * loss_i)``; fixed point ``-tau * loss_i``."""
    if not (np.isfinite(omega_i) and np.isfinite(loss_i)):
        raise InvalidInputError("tracker inputs must be finite")
    return float(omega_i - alpha * (omega_i + tau * loss_i))


def removal_threshold(n):
    """Default weight below which a sample counts as removed: ``1 / (10 N)``."""
    return 1.0 / (10 * n)
