"""Offline penalty-based bilevel data selection and the direct-mixing baseline.

Under separable data the lower-level value function is identically zero, so
the penalised objective is

    L0(theta) + gamma * sum_i sigma_i(omega) * L_SFT(theta; i)

and one stochastic step samples a validation index ``j`` and an SFT index
``i`` uniformly, updates ``theta`` on both terms, then moves ``omega`` along
``-grad sigma_i`` scaled by the post-update SFT loss of sample ``i``.  The
``1/N`` in front of the weighted sum is a constant rescale of ``gamma`` and
is folded into it.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .backbone import Params, loss_and_grad, sample_loss
from .errors import InvalidConfigError, InvalidInputError, TrainingDivergedError
from .weights import WeightState, pbgd_omega_update, removal_threshold

__all__ = [
    "TrainConfig",
    "TrainState",
    "MetricsRow",
    "TrainResult",
    "METRICS_FIELDS",
    "penalty_gamma",
    "pbgd_step",
    "direct_mixing_step",
    "train_offline",
    "dataset_loss",
]

METRICS_FIELDS = ("step", "epoch", "val_loss", "sft_loss", "w_useless_mean", "w_useful_mean", "gamma")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 10.0
    beta: float = 2.0
    rho0: float = 0.1
    delta_rho: float = 0.1
    epochs: int = 9
    rho_mix: float = 0.5
    tau: float = 1.0
    eps_w: float | None = None
    eps_sep: float = 1e-3
    optimizer: str = "sgd"
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int | None = None
    divergence_limit: float = 1e6

    def __post_init__(self):
        if not self.alpha >= 0:
            raise InvalidConfigError("alpha must be nonnegative", key="train.alpha")
        if not self.beta > 0:
            raise InvalidConfigError("beta must be positive", key="train.beta")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be nonnegative", key="train.epochs")
        if self.rho0 < 0 or self.delta_rho < 0:
            raise InvalidConfigError("penalty schedule must be nonnegative", key="train.rho0")
        last = self.rho0 + self.delta_rho * max(self.epochs - 1, 0)
        if not last < 1:
            raise InvalidConfigError(
                f"penalty schedule reaches rho={last:g} >= 1 within {self.epochs} epochs", key="train.delta_rho"
            )
        if not 0 < self.rho_mix <= 1:
            raise InvalidConfigError("rho_mix must lie in (0, 1]", key="train.rho_mix")
        if not self.tau > 0:
            raise InvalidConfigError("tau must be positive", key="train.tau")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfigError(f"unknown optimizer {self.optimizer!r}", key="train.optimizer")
        if self.log_every is not None and self.log_every < 1:
            raise InvalidConfigError("log_every must be positive", key="train.log_every")

    def removal_threshold(self, n):
        return self.eps_w if self.eps_w is not None else removal_threshold(n)


@dataclass(frozen=True, eq=False)
class TrainState:
    params: Params
    weights: WeightState
    step: int = 0
    epoch: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def initial(cls, params, n):
        return cls(params=params, weights=WeightState.uniform(n))


@dataclass(frozen=True)
class MetricsRow:
    step: int
    epoch: int
    val_loss: float
    sft_loss: float
    w_useless_mean: float
    w_useful_mean: float
    gamma: float
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        row = {name: getattr(self, name) for name in METRICS_FIELDS}
        row.update(self.extra)
        return row


class TrainResult(NamedTuple):
    params: Params
    weights: WeightState
    metrics: list


def penalty_gamma(epoch, cfg):
    """``rho / (1 - rho)`` with ``rho = rho0 + delta_rho * epoch``."""
    rho = cfg.rho0 + cfg.delta_rho * epoch
    if not rho < 1:
        raise InvalidConfigError(f"penalty schedule reached rho={rho:g} >= 1 at epoch {epoch}", key="train.delta_rho")
    return rho / (1.0 - rho)


def _apply_direction(state, direction, cfg):
    """Move ``theta`` along ``-direction`` with SGD or Adam; guards divergence."""
    step = state.step + 1
    if not np.all(np.isfinite(direction)):
        raise TrainingDivergedError("non-finite gradient", step)
    m = v = None
    if cfg.optimizer == "adam":
        m = direction * (1 - cfg.adam_b1) if state.m is None else cfg.adam_b1 * state.m + (1 - cfg.adam_b1) * direction
        sq = direction * direction
        v = sq * (1 - cfg.adam_b2) if state.v is None else cfg.adam_b2 * state.v + (1 - cfg.adam_b2) * sq
        mhat = m / (1 - cfg.adam_b1**step)
        vhat = v / (1 - cfg.adam_b2**step)
        new = state.params.values - cfg.beta * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    else:
        new = state.params.values - cfg.beta * direction
    if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > cfg.divergence_limit:
        raise TrainingDivergedError(f"parameter magnitude exceeded {cfg.divergence_limit:g}", step)
    return state.params.replace(new), m, v


def penalty_update(state, val_grad, sft_grad, i_k, coefficient, gamma, cfg, scale=1.0):
    """Shared body of the offline and online penalty steps.

    ``coefficient(params_new)`` returns the weight-update coefficient at the
    updated parameters.
    """
    sigma_i = state.weights.weights[i_k]
    direction = val_grad + (gamma * scale * sigma_i) * sft_grad
    params, m, v = _apply_direction(state, direction, cfg)
    C = coefficient(params)
    weights = pbgd_omega_update(state.weights, i_k, C, cfg.alpha, gamma, scale=scale)
    if not np.all(np.isfinite(weights.logits)):
        raise TrainingDivergedError("non-finite weight logits", state.step + 1)
    return dataclasses.replace(state, params=params, weights=weights, step=state.step + 1, m=m, v=v)


def pbgd_step(state, val_sample, sft_sample, sft_index, gamma, cfg, val_grad=None, scale=1.0):
    """One BDS step.

    ``val_grad`` overrides the stochastic validation gradient (e.g. with the
    full-batch one); ``scale`` multiplies the SFT term in both updates.
    """
    if not 0 <= sft_index < state.weights.N:
        raise InvalidInputError(f"SFT index {sft_index} out of range")
    if val_grad is None:
        _, val_grad = loss_and_grad(state.params, val_sample)
    _, sft_grad = loss_and_grad(state.params, sft_sample)
    return penalty_update(
        state, val_grad, sft_grad, sft_index, lambda p: sample_loss(p, sft_sample), gamma, cfg, scale
    )


def direct_mixing_step(state, val_sample, sft_sample, rho_mix, cfg):
    """``theta -= beta * ((1 - rho) grad L0 + rho grad L_SFT)``; weights untouched."""
    if not 0 < rho_mix <= 1:
        raise InvalidInputError("rho_mix must lie in (0, 1]")
    _, val_grad = loss_and_grad(state.params, val_sample)
    _, sft_grad = loss_and_grad(state.params, sft_sample)
    direction = (1.0 - rho_mix) * val_grad + rho_mix * sft_grad
    params, m, v = _apply_direction(state, direction, cfg)
    return dataclasses.replace(state, params=params, step=state.step + 1, m=m, v=v)


def dataset_loss(params, samples):
    """Mean per-sample SFT loss over ``samples`` (nan when empty)."""
    if not samples:
        return math.nan
    return float(np.mean([sample_loss(params, s) for s in samples]))


def sft_losses(params, samples):
    return np.array([sample_loss(params, s) for s in samples])


def weight_summary(weights, datasets):
    mask = datasets.useless_mask()
    if mask is None:
        return math.nan, math.nan
    w = weights.weights
    useless = float(w[mask].mean()) if mask.any() else math.nan
    useful = float(w[~mask].mean()) if (~mask).any() else math.nan
    return useless, useful


def make_row(state, datasets, gamma, sft_targets=None, extra=None):
    """Metrics for the current state.

    ``sft_targets`` replaces the SFT split when computing the selected-SFT
    loss (the online trainer substitutes generated responses).
    """
    targets = datasets.sft if sft_targets is None else sft_targets
    losses = np.array([
        np.mean([sample_loss(state.params, s) for s in t]) if isinstance(t, tuple) else sample_loss(state.params, t)
        for t in targets
    ])
    w_useless, w_useful = weight_summary(state.weights, datasets)
    return MetricsRow(
        step=state.step,
        epoch=state.epoch,
        val_loss=dataset_loss(state.params, datasets.val),
        sft_loss=float(state.weights.weights @ losses),
        w_useless_mean=w_useless,
        w_useful_mean=w_useful,
        gamma=gamma,
        extra=dict(extra or {}),
    )


def index_stream(seed):
    """Generator for the (validation, SFT) index draws of a run."""
    return np.random.default_rng([seed, 0])


def run_loop(cfg, datasets, params, seed, step_fn, row_fn=None, sink=None, on_step=None, state=None):
    """Shared epoch loop: one SFT-sized epoch of uniform draws per penalty level.

    ``step_fn(state, j, i, gamma)`` performs one update.  ``row_fn(state,
    gamma)`` builds a metrics row; ``sink`` receives each row as it is made.
    ``on_step(state, k)`` runs before each step and may return a new state.
    """
    datasets.require("sft", "val")
    N = datasets.N
    if row_fn is None:
        def row_fn(st, gamma):
            return make_row(st, datasets, gamma)
    log_every = cfg.log_every or N
    rng = index_stream(seed)
    if state is None:
        state = TrainState.initial(params, N)
    metrics = []

    def emit(row):
        metrics.append(row)
        if sink is not None:
            sink(row)

    if cfg.epochs > 0:
        emit(row_fn(state, penalty_gamma(0, cfg)))
    for epoch in range(cfg.epochs):
        gamma = penalty_gamma(epoch, cfg)
        for _ in range(N):
            j = int(rng.integers(len(datasets.val)))
            i = int(rng.integers(N))
            if on_step is not None:
                state = on_step(state, state.step) or state
            state = step_fn(state, j, i, gamma)
            if state.step % N == 0:
                state = dataclasses.replace(state, epoch=state.step // N)
            if state.step % log_every == 0:
                emit(row_fn(state, gamma))
    return state, metrics


def train_offline(cfg, datasets, params, mode="bds", seed=0, sink=None):
    """Run BDS (``mode='bds'``) or direct mixing (``mode='mixing'``).

    Returns ``(params, weights, metrics)``.  Bit-reproducible for a fixed seed.
    """
    if mode == "bds":
        def step_fn(state, j, i, gamma):
            return pbgd_step(state, datasets.val[j], datasets.sft[i], i, gamma, cfg)
        row_fn = None
    elif mode == "mixing":
        def step_fn(state, j, i, gamma):
            return direct_mixing_step(state, datasets.val[j], datasets.sft[i], cfg.rho_mix, cfg)

        def row_fn(state, gamma):
            return make_row(state, datasets, math.nan)
    else:
        raise InvalidInputError(f"unknown offline mode {mode!r}")
    state, metrics = run_loop(cfg, datasets, params, seed, step_fn, row_fn=row_fn, sink=sink)
    return TrainResult(state.params, state.weights, metrics)
