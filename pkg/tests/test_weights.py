import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bilevel_select.errors import InvalidInputError
from bilevel_select.weights import (
    WeightState,
    bmo_omega_track,
    lse_implicit_weights,
    pbgd_omega_update,
    removal_threshold,
    softmax_weight_grad,
    softmax_weights,
)

logit_vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-20, 20))


def test_uniform_weights():
    assert np.array_equal(softmax_weights(np.zeros(4)), np.full(4, 0.25))


def test_ln3_weights():
    w = softmax_weights([math.log(3), 0.0])
    assert np.allclose(w, [0.75, 0.25], rtol=0, atol=1e-15)


def test_weights_match_longdouble(rng):
    om = rng.normal(scale=4, size=30)
    e = np.exp(om.astype(np.longdouble))
    ref = (e / e.sum()).astype(np.float64)
    assert np.max(np.abs(softmax_weights(om) - ref) / ref) < 1e-12


def test_weights_reject_nonfinite():
    with pytest.raises(InvalidInputError):
        softmax_weights([0.0, np.inf])
    with pytest.raises(InvalidInputError):
        WeightState.from_logits([np.nan])


def test_weight_grad_symmetric_pair():
    assert np.allclose(softmax_weight_grad(np.zeros(2), 0), [0.25, -0.25], atol=1e-16)


def test_weight_grad_index_error():
    with pytest.raises(IndexError):
        softmax_weight_grad(np.zeros(3), 3)


def test_weight_grad_matches_finite_differences(rng):
    om = rng.normal(size=6)
    h = 1e-6
    for i in range(6):
        fd = np.array([
            (softmax_weights(om + h * e)[i] - softmax_weights(om - h * e)[i]) / (2 * h) for e in np.eye(6)
        ])
        g = softmax_weight_grad(om, i)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) < 1e-6


def test_pbgd_update_hand_value():
    w = pbgd_omega_update(WeightState.uniform(2), 0, C=1.0, alpha=1.0, gamma=1.0)
    assert np.allclose(w.logits, [-0.25, 0.25], atol=1e-16)


def test_pbgd_update_zero_coefficient_is_identity(rng):
    w = WeightState.from_logits(rng.normal(size=5))
    assert np.array_equal(pbgd_omega_update(w, 2, 0.0, 3.0, 2.0).logits, w.logits)


def test_pbgd_update_rejects_negative_coefficient():
    with pytest.raises(InvalidInputError):
        pbgd_omega_update(WeightState.uniform(3), 0, -1e-3, 1.0, 1.0)


def test_implicit_weights_examples():
    assert np.allclose(lse_implicit_weights([2.0, 2.0, 2.0]), 1 / 3, atol=1e-16)
    assert np.allclose(lse_implicit_weights([0.0, math.log(3)]), [0.75, 0.25], atol=1e-15)
    with pytest.raises(InvalidInputError):
        lse_implicit_weights([1.0], tau=0)
    with pytest.raises(InvalidInputError):
        lse_implicit_weights([-1.0, 0.0])


def test_implicit_weights_are_softmax_of_logprobs(rng):
    nll = rng.exponential(3.0, size=7)
    lam = lse_implicit_weights(nll, 1.0)
    logprob = -nll
    for a in range(7):
        for b in range(7):
            assert abs(math.log(lam[a] / lam[b]) - (logprob[a] - logprob[b])) < 1e-12
    assert int(np.argmax(lam)) == int(np.argmax(logprob))


def test_tracker_examples():
    assert bmo_omega_track(-3.0, 1.5, 0.7, tau=2.0) == -3.0
    assert bmo_omega_track(0.0, 2.0, 0.5, tau=1.0) == -1.0
    om = 5.0
    for _ in range(100):
        om = bmo_omega_track(om, 1.25, 0.5, tau=2.0)
    assert abs(om + 2.5) < 1e-10
    with pytest.raises(InvalidInputError):
        bmo_omega_track(np.nan, 1.0, 0.5)


def test_removal_threshold():
    assert removal_threshold(40) == 1 / 400


@given(logit_vectors)
def test_weights_on_open_simplex(om):
    w = WeightState.from_logits(om)
    assert abs(w.weights.sum() - 1) < 1e-12
    assert np.all(w.weights >= 0)
    assert np.allclose(w.weights, softmax_weights(om), rtol=0, atol=1e-12)


@given(logit_vectors, st.data())
def test_weight_grad_sign_pattern(om, data):
    i = data.draw(st.integers(0, om.size - 1))
    g = softmax_weight_grad(om, i)
    assert abs(g.sum()) < 1e-12
    assert g[i] >= 0 and np.all(np.delete(g, i) <= 0)


@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-3, 3)), st.data(),
       st.floats(1e-3, 5), st.floats(0.01, 5), st.floats(0.01, 5))
def test_pbgd_update_sign_pattern_and_sum(om, data, C, alpha, gamma):
    i = data.draw(st.integers(0, om.size - 1))
    w = WeightState.from_logits(om)
    new = pbgd_omega_update(w, i, C, alpha, gamma)
    delta = new.logits - w.logits
    assert abs(delta.sum()) < 1e-12
    assert delta[i] < 0 and np.all(np.delete(delta, i) > 0)
    assert np.all(np.isfinite(new.logits))


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 50)), st.floats(0.1, 10))
def test_implicit_weights_decrease_in_loss(losses, tau):
    lam = lse_implicit_weights(losses, tau)
    assert abs(lam.sum() - 1) < 1e-12
    order = np.argsort(losses, kind="stable")
    sorted_losses, sorted_lam = losses[order], lam[order]
    strictly = np.diff(sorted_losses) > 0
    assert np.all(np.diff(sorted_lam)[strictly] <= 0)
