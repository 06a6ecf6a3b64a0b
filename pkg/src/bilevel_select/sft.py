"""Token-level SFT loss under a column-wise softmax policy.

A backbone emits a logit matrix ``z`` of shape ``(V, D)``: one column of
vocabulary logits per response position.  Everything here works on that
matrix directly, in float64 and in log-space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInputError

__all__ = [
    "TokenSample",
    "softmax_columns",
    "log_softmax_columns",
    "sft_loss",
    "sft_loss_grad_z",
    "seq_logprob",
    "hessian_quadratic_form",
]


@dataclass(frozen=True)
class TokenSample:
    """A (question, response) pair of token ids.

    Sequences are stored as tuples so samples are hashable and immutable.
    """

    x: tuple
    y: tuple

    def __init__(self, x, y):
        x = tuple(int(t) for t in x)
        y = tuple(int(t) for t in y)
        if len(x) < 1:
            raise InvalidInputError("question must contain at least one token")
        if len(y) < 1:
            raise InvalidInputError("response must contain at least one token")
        if min(x) < 0 or min(y) < 0:
            raise InvalidInputError("token ids must be nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def D(self):
        return len(self.y)

    def check_vocab(self, V):
        if max(self.x) >= V or max(self.y) >= V:
            raise InvalidInputError(f"token id out of range for vocabulary of size {V}")
        return self


def _as_logits(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInputError(f"logit matrix must be 2-D (V, D), got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logit matrix contains non-finite entries")
    return z


def _as_targets(z, y):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    V, D = z.shape
    if y.shape[0] != D:
        raise InvalidInputError(f"response length {y.shape[0]} does not match logit columns {D}")
    if np.any(y < 0) or np.any(y >= V):
        raise InvalidInputError(f"target token id out of range [0, {V})")
    return y


def softmax_columns(z):
    """Column-wise softmax with per-column max subtraction."""
    z = _as_logits(z)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def log_softmax_columns(z):
    z = _as_logits(z)
    return z - logsumexp(z, axis=0, keepdims=True)


def sft_loss(z, y):
    """Negative log-likelihood of the response tokens, summed over positions."""
    z = _as_logits(z)
    y = _as_targets(z, y)
    cols = np.arange(z.shape[1])
    shifted = z - z[y, cols]
    top = shifted.max(axis=0)
    nll = top + np.log(np.exp(shifted - top).sum(axis=0))
    # when the target is the column max, log1p keeps the tiny near-fit losses accurate
    fitted = top == 0
    if np.any(fitted):
        rest = np.exp(shifted[:, fitted])
        rest[y[fitted], np.arange(rest.shape[1])] = 0.0
        nll[fitted] = np.log1p(rest.sum(axis=0))
    # each term is >= 0 mathematically; clip rounding noise
    return float(np.maximum(nll, 0.0).sum())


def sft_loss_grad_z(z, y):
    """Gradient of :func:`sft_loss` in ``z``: column d is softmax(z[:, d]) - e_{y_d}."""
    z = _as_logits(z)
    y = _as_targets(z, y)
    g = softmax_columns(z)
    g[y, np.arange(z.shape[1])] -= 1.0
    return g


def seq_logprob(z, y):
    """Log-probability of the whole response; the exact negation of :func:`sft_loss`."""
    return -sft_loss(z, y)


def hessian_quadratic_form(z, y, u):
    """``vec(u)^T H vec(u)`` for the SFT Hessian in ``z``.

    The Hessian is block diagonal over positions with blocks
    ``diag(p_d) - p_d p_d^T``, so the form reduces to a per-column
    weighted variance of ``u`` under ``p_d``; that form is computed directly
    and is nonnegative up to rounding.
    """
    z = _as_logits(z)
    _as_targets(z, y)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != z.shape:
        raise InvalidInputError(f"direction shape {u.shape} does not match logits {z.shape}")
    if not np.all(np.isfinite(u)):
        raise InvalidInputError("direction contains non-finite entries")
    p = softmax_columns(z)
    mean = (p * u).sum(axis=0)
    return float((p * (u - mean) ** 2).sum())
