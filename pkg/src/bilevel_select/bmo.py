"""Bilevel multi-objective machinery: merit functions and the LSE penalty solver.

The weak Pareto front of per-sample losses is the zero set of the merit
``u(theta) = sup_theta' min_m (L_m(theta) - L_m(theta'))``.  With a shared
zero-loss minimiser the merit collapses to ``min_m L_m(theta)``, whose LSE
smoothing gives implicit weights ``softmax(-tau * L(theta))``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .backbone import loss_and_grad, sample_loss
from .errors import InvalidInputError
from .offline import TrainConfig, TrainResult, TrainState, _apply_direction, make_row, run_loop
from .weights import WeightState, bmo_omega_track, lse_implicit_weights

__all__ = [
    "ObjectiveVector",
    "lse",
    "merit_exact",
    "merit_separable",
    "pmo_lse_direction",
    "pmo_lse_step",
    "stochastic_bmo_step",
    "train_bmo",
]


@dataclass(frozen=True)
class ObjectiveVector:
    """M loss callables on a parameter array, with optional gradients."""

    losses: Sequence[Callable]
    grads: Sequence[Callable] | None = None

    def __post_init__(self):
        if len(self.losses) < 1:
            raise InvalidInputError("need at least one objective")
        if self.grads is not None and len(self.grads) != len(self.losses):
            raise InvalidInputError("one gradient per objective")

    @property
    def M(self):
        return len(self.losses)

    def values(self, theta):
        return np.array([f(theta) for f in self.losses], dtype=np.float64)


def lse(q, tau=1.0):
    """``(1/tau) log sum exp(tau q)``, within ``log(M)/tau`` above ``max(q)``."""
    if not tau > 0:
        raise InvalidInputError(f"LSE temperature must be positive, got {tau}")
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise InvalidInputError("q must be a nonempty vector")
    return float(logsumexp(tau * q) / tau)


def merit_exact(theta, candidates, objectives):
    """Grid-restricted merit: ``max over candidates of min_m (L_m(theta) - L_m(c))``."""
    if len(candidates) == 0:
        raise InvalidInputError("merit needs at least one candidate")
    here = objectives.values(theta)
    best = -math.inf
    for c in candidates:
        best = max(best, float(np.min(here - objectives.values(c))))
    return best


def merit_separable(losses):
    """Merit under a shared zero-loss minimiser: the smallest objective value."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise InvalidInputError("need at least one objective value")
    return float(losses.min())


def pmo_lse_direction(params, val_sample, objectives, gamma, tau):
    """``grad L0 + gamma * sum_m lambda_m grad L_m`` with ``lambda = softmax(-tau L)``."""
    _, direction = loss_and_grad(params, val_sample)
    results = [loss_and_grad(params, s) for s in objectives]
    losses = np.array([r[0] for r in results])
    lam = lse_implicit_weights(losses, tau)
    for lam_m, (_, g) in zip(lam, results):
        direction = direction + (gamma * lam_m) * g
    return direction


def pmo_lse_step(params, val_sample, objectives, gamma, tau, beta, divergence_limit=1e6):
    """Deterministic LSE-penalty step over all M per-sample objectives."""
    direction = pmo_lse_direction(params, val_sample, objectives, gamma, tau)
    cfg = TrainConfig(beta=beta, epochs=0, divergence_limit=divergence_limit)
    new, _, _ = _apply_direction(TrainState(params, WeightState.uniform(1)), direction, cfg)
    return new


def stochastic_bmo_step(state, val_sample, sft_sample, i_k, gamma, cfg, alpha_track=1.0, tau=None):
    """Track ``omega_i -> -tau * L_i`` for the sampled index, then step ``theta``.

    The tracker uses the loss at the current parameters; the parameter step
    reads the refreshed softmax weight of ``i_k``.
    """
    tau = cfg.tau if tau is None else tau
    if not 0 < alpha_track <= 1:
        raise InvalidInputError("tracker step must lie in (0, 1]")
    loss_i, sft_grad = loss_and_grad(state.params, sft_sample)
    logits = np.array(state.weights.logits)
    logits[i_k] = bmo_omega_track(logits[i_k], loss_i, alpha_track, tau)
    weights = WeightState.from_logits(logits)
    _, val_grad = loss_and_grad(state.params, val_sample)
    direction = val_grad + (gamma * weights.weights[i_k]) * sft_grad
    params, m, v = _apply_direction(state, direction, cfg)
    return dataclasses.replace(state, params=params, weights=weights, step=state.step + 1, m=m, v=v)


def tracking_gap(state, datasets, tau):
    """Max-abs gap between tracked weights and the exact LSE weights."""
    losses = np.array([sample_loss(state.params, s) for s in datasets.sft])
    return float(np.max(np.abs(state.weights.weights - lse_implicit_weights(losses, tau))))


def train_bmo(cfg, datasets, params, seed=0, alpha_track=1.0, sink=None):
    """Stochastic BMO run sharing the offline sampling stream for ``seed``."""

    def step_fn(state, j, i, gamma):
        return stochastic_bmo_step(state, datasets.val[j], datasets.sft[i], i, gamma, cfg, alpha_track)

    def row_fn(state, gamma):
        return make_row(state, datasets, gamma, extra={"lambda_gap": tracking_gap(state, datasets, cfg.tau)})

    state, metrics = run_loop(cfg, datasets, params, seed, step_fn, row_fn=row_fn, sink=sink)
    return TrainResult(state.params, state.weights, metrics)
