import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bilevel_select.backbone import Params, init_params, loss_and_grad, sample_loss
from bilevel_select.bmo import (
    ObjectiveVector,
    lse,
    merit_exact,
    merit_separable,
    pmo_lse_direction,
    pmo_lse_step,
    stochastic_bmo_step,
    tracking_gap,
    train_bmo,
)
from bilevel_select.errors import InvalidInputError
from bilevel_select.offline import TrainConfig, TrainState, dataset_loss, train_offline
from bilevel_select.theory import biquadratic_toy, canonical_instance, separable_tabular_toy
from bilevel_select.weights import WeightState, lse_implicit_weights


@pytest.fixture(scope="module")
def inst():
    return canonical_instance(0)


def rand_state(inst, rng, n=None):
    p = Params(rng.standard_normal(inst.spec.n_params), inst.spec)
    return TrainState(p, WeightState.from_logits(rng.normal(size=n or inst.datasets.N)))


def test_lse_small_cases():
    assert abs(lse([0.0, 0.0]) - math.log(2)) < 1e-15
    assert lse([3.0]) == 3.0
    assert abs(lse([1.0, -800.0], tau=2.0) - 1.0) < 1e-15
    with pytest.raises(InvalidInputError):
        lse([1.0], tau=0.0)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(0.05, 100))
def test_lse_sandwich(q, tau):
    v = lse(q, tau)
    assert q.max() - 1e-9 <= v <= q.max() + math.log(q.size) / tau + 1e-9


def test_merit_separable_is_min():
    assert merit_separable([0.4, 0.1, 2.0]) == 0.1
    with pytest.raises(InvalidInputError):
        merit_separable([])


@pytest.mark.parametrize("theta,expected", [(0.0, 0.0), (0.37, 0.0), (1.0, 0.0), (1.5, 0.25),
                                            (-0.6, 0.36), (2.0, 1.0)])
def test_merit_on_biquadratic_grid(theta, expected):
    # front is [0, 1]; outside it the nearest endpoint wins and the merit is the squared gap
    objectives, grid = biquadratic_toy()
    assert abs(merit_exact(np.array([theta]), grid.points, objectives) - expected) < 1e-12


def test_merit_separable_close_to_exact_on_toy():
    objectives, grid, _ = separable_tabular_toy()
    rng = np.random.default_rng(4)
    for theta in rng.uniform(-8, 8, size=(6, 2)):
        gap = abs(merit_separable(objectives.values(theta)) - merit_exact(theta, grid.points, objectives))
        assert gap < grid.resolution + 2e-3


def test_objective_vector_checks():
    with pytest.raises(InvalidInputError):
        ObjectiveVector([])
    with pytest.raises(InvalidInputError):
        ObjectiveVector([abs], grads=[abs, abs])


def test_lse_direction_compositional(inst, rng):
    st_ = rand_state(inst, rng)
    objs = inst.datasets.sft[:5]
    gamma, tau = 0.7, 0.3
    losses = np.array([sample_loss(st_.params, s) for s in objs])
    lam = np.exp(-tau * losses) / np.exp(-tau * losses).sum()
    ref = loss_and_grad(st_.params, inst.datasets.val[0])[1]
    for l_m, s in zip(lam, objs):
        ref = ref + gamma * l_m * loss_and_grad(st_.params, s)[1]
    got = pmo_lse_direction(st_.params, inst.datasets.val[0], objs, gamma, tau)
    assert np.max(np.abs(got - ref)) < 1e-12


def test_lse_direction_equal_losses_is_mean(inst):
    p = init_params(inst.spec)  # tabular zeros: every sample has the same loss
    objs = inst.datasets.sft[:4]
    got = pmo_lse_direction(p, inst.datasets.val[0], objs, 1.0, 2.0)
    ref = loss_and_grad(p, inst.datasets.val[0])[1] + np.mean([loss_and_grad(p, s)[1] for s in objs], axis=0)
    assert np.max(np.abs(got - ref)) < 1e-14


def test_lse_direction_hard_min_limit(inst, rng):
    st_ = rand_state(inst, rng)
    objs = inst.datasets.sft[:6]
    losses = [sample_loss(st_.params, s) for s in objs]
    v0 = loss_and_grad(st_.params, inst.datasets.val[0])[1]
    hard = v0 + loss_and_grad(st_.params, objs[int(np.argmin(losses))])[1]
    soft = pmo_lse_direction(st_.params, inst.datasets.val[0], objs, 1.0, 1e3)
    cos = hard @ soft / (np.linalg.norm(hard) * np.linalg.norm(soft))
    assert cos > 0.999


def test_lse_step_moves_against_direction(inst, rng):
    st_ = rand_state(inst, rng)
    objs = inst.datasets.sft[:3]
    d = pmo_lse_direction(st_.params, inst.datasets.val[1], objs, 0.5, 1.0)
    new = pmo_lse_step(st_.params, inst.datasets.val[1], objs, 0.5, 1.0, beta=0.1)
    assert np.allclose(new.values, st_.params.values - 0.1 * d, rtol=0, atol=1e-15)


def test_tracker_fixed_point_keeps_logit(inst, rng):
    st_ = rand_state(inst, rng)
    s = inst.datasets.sft[3]
    logits = np.array(st_.weights.logits)
    logits[3] = -2.0 * sample_loss(st_.params, s)
    st_ = TrainState(st_.params, WeightState.from_logits(logits))
    nxt = stochastic_bmo_step(st_, inst.datasets.val[0], s, 3, 0.5, TrainConfig(), tau=2.0)
    assert abs(nxt.weights.logits[3] - logits[3]) < 1e-12
    others = np.delete(np.arange(logits.size), 3)
    assert np.array_equal(nxt.weights.logits[others], logits[others])


def test_full_tracker_step_lands_on_target(inst, rng):
    st_ = rand_state(inst, rng)
    s = inst.datasets.sft[10]
    nxt = stochastic_bmo_step(st_, inst.datasets.val[0], s, 10, 0.5, TrainConfig(), alpha_track=1.0)
    assert nxt.weights.logits[10] == -sample_loss(st_.params, s)


@pytest.mark.parametrize("a", [0.0, 1.5])
def test_tracker_step_range(inst, rng, a):
    st_ = rand_state(inst, rng)
    with pytest.raises(InvalidInputError):
        stochastic_bmo_step(st_, inst.datasets.val[0], inst.datasets.sft[0], 0, 0.5, TrainConfig(), alpha_track=a)


def test_zero_penalty_is_validation_sgd(inst, rng):
    st_ = rand_state(inst, rng)
    cfg = TrainConfig(beta=0.3)
    nxt = stochastic_bmo_step(st_, inst.datasets.val[2], inst.datasets.sft[5], 5, 0.0, cfg)
    ref = st_.params.values - 0.3 * loss_and_grad(st_.params, inst.datasets.val[2])[1]
    assert np.array_equal(nxt.params.values, ref)


def test_tracking_gap_zero_when_all_tracked(inst, rng):
    st_ = rand_state(inst, rng)
    losses = np.array([sample_loss(st_.params, s) for s in inst.datasets.sft])
    tracked = TrainState(st_.params, WeightState.from_logits(-1.5 * losses))
    assert tracking_gap(tracked, inst.datasets, 1.5) < 1e-15
    assert np.allclose(tracked.weights.weights, lse_implicit_weights(losses, 1.5), rtol=0, atol=1e-15)


def test_bmo_run_logs_tracking_gap(inst):
    res = train_bmo(TrainConfig(epochs=1), inst.datasets, init_params(inst.spec))
    assert all("lambda_gap" in r.extra for r in res.metrics)
    assert res.metrics[0].extra["lambda_gap"] < 1e-15  # uniform start matches equal losses


def test_bmo_agrees_with_bds_on_validation():
    for seed in range(2):
        inst = canonical_instance(seed)
        p0 = init_params(inst.spec, seed)
        a = train_offline(TrainConfig(), inst.datasets, p0, "bds", seed)
        b = train_bmo(TrainConfig(), inst.datasets, p0, seed)
        la, lb = dataset_loss(a.params, inst.datasets.val), dataset_loss(b.params, inst.datasets.val)
        assert abs(la - lb) / la < 0.05
