"""scikit-learn style wrappers around the trainers.

Inputs are question/response pairs: a list of ``TokenSample``, a list of
``(x, y)`` pairs, or a 2-D integer array whose first ``question_len``
columns are the question.  ``fit`` takes the SFT split as ``X`` and the
validation split as ``validation``.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneSpec, greedy, init_params, sample_loss
from .bmo import train_bmo
from .data import Datasets
from .errors import InvalidInputError
from .offline import TrainConfig, train_offline
from .online import OnlineConfig, train_online
from .sft import TokenSample
from .weights import removal_threshold

__all__ = [
    "check_token_pairs",
    "check_questions",
    "BilevelDataSelector",
    "DirectMixing",
    "OnlineSelfRefiner",
    "StochasticBMO",
]


def check_token_pairs(X, question_len=None, name="X"):
    """Normalise ``X`` to a tuple of TokenSample."""
    if isinstance(X, np.ndarray):
        if X.ndim != 2 or not np.issubdtype(X.dtype, np.integer):
            raise InvalidInputError(f"{name} must be a 2-D integer array")
        if question_len is None or not 0 < question_len < X.shape[1]:
            raise InvalidInputError(f"{name}: an array input needs 0 < question_len < {X.shape[1]}")
        return tuple(TokenSample(r[:question_len], r[question_len:]) for r in X)
    out = []
    for k, item in enumerate(X):
        if isinstance(item, TokenSample):
            out.append(item)
        elif isinstance(item, (tuple, list)) and len(item) == 2:
            out.append(TokenSample(item[0], item[1]))
        else:
            raise InvalidInputError(f"{name}[{k}] is neither a TokenSample nor an (x, y) pair")
    if not out:
        raise InvalidInputError(f"{name} is empty")
    return tuple(out)


def check_questions(questions, question_len):
    qs = [tuple(int(t) for t in q) for q in (questions.tolist() if isinstance(questions, np.ndarray) else questions)]
    bad = [q for q in qs if len(q) != question_len]
    if bad:
        raise InvalidInputError(f"questions must have length {question_len}, got {bad[0]}")
    return qs


class _SFTEstimator(BaseEstimator):
    """Shared fitting plumbing; subclasses supply ``_train``."""

    def _train_config(self):
        return TrainConfig(alpha=self.alpha, beta=self.beta, rho0=self.rho0, delta_rho=self.delta_rho,
                           epochs=self.epochs, optimizer=self.optimizer)

    def fit(self, X, y=None, *, validation, question_len=None, labels=None):
        sft = check_token_pairs(X, question_len)
        val = check_token_pairs(validation, question_len, name="validation")
        L_x = len(sft[0].x)
        if any(len(s.x) != L_x for s in sft + val):
            raise InvalidInputError("every question must have the same length")
        D = max(len(s.y) for s in sft + val)
        V = self.V if self.V is not None else 1 + max(max(s.x + s.y) for s in sft + val)
        self.spec_ = BackboneSpec(self.backbone, V, L_x, D, hidden=self.hidden, window=self.window)
        ds = Datasets(sft=sft, val=val, labels=labels).check_vocab(V)
        params = init_params(self.spec_, self.random_state)
        result = self._train(ds, params)
        self.params_, self.metrics_ = result.params, result.metrics
        self.weights_ = np.asarray(result.weights.weights)
        self.n_samples_ = len(sft)
        return self

    def get_support(self):
        """Mask of the fitted SFT samples whose weight survives the removal threshold."""
        check_is_fitted(self, "weights_")
        return self.weights_ >= removal_threshold(self.n_samples_)

    def transform(self, X, question_len=None):
        """Per-sample SFT loss under the fitted model, shape ``(n, 1)``."""
        check_is_fitted(self, "params_")
        samples = check_token_pairs(X, question_len or self.spec_.question_len)
        return np.array([[sample_loss(self.params_, s)] for s in samples])

    def predict(self, questions):
        """Greedy responses, shape ``(n, response_len)``."""
        check_is_fitted(self, "params_")
        qs = check_questions(questions, self.spec_.question_len)
        return np.array([greedy(self.params_, q, self.spec_.response_len) for q in qs], dtype=np.int64)

    def score(self, X, y=None, question_len=None):
        """Negative mean SFT loss (higher is better)."""
        return -float(self.transform(X, question_len).mean())


class BilevelDataSelector(_SFTEstimator):
    """Penalty-based bilevel data selection over per-sample softmax weights."""

    def __init__(self, backbone="tabular", V=None, hidden=8, window=2, alpha=10.0, beta=2.0,
                 rho0=0.1, delta_rho=0.1, epochs=9, optimizer="sgd", random_state=0):
        self.backbone = backbone
        self.V = V
        self.hidden = hidden
        self.window = window
        self.alpha = alpha
        self.beta = beta
        self.rho0 = rho0
        self.delta_rho = delta_rho
        self.epochs = epochs
        self.optimizer = optimizer
        self.random_state = random_state

    def _train(self, ds, params):
        return train_offline(self._train_config(), ds, params, "bds", self.random_state)


class DirectMixing(_SFTEstimator):
    """Fixed convex mix of validation and SFT losses; every sample keeps weight 1/N."""

    def __init__(self, backbone="tabular", V=None, hidden=8, window=2, rho_mix=0.5, beta=2.0,
                 epochs=9, optimizer="sgd", random_state=0):
        self.backbone = backbone
        self.V = V
        self.hidden = hidden
        self.window = window
        self.rho_mix = rho_mix
        self.beta = beta
        self.epochs = epochs
        self.optimizer = optimizer
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(beta=self.beta, epochs=self.epochs, rho_mix=self.rho_mix, optimizer=self.optimizer)

    def _train(self, ds, params):
        return train_offline(self._train_config(), ds, params, "mixing", self.random_state)


class OnlineSelfRefiner(BilevelDataSelector):
    """Selection where a masked share of questions trains on the model's own generations."""

    def __init__(self, backbone="tabular", V=None, hidden=8, window=2, alpha=10.0, beta=2.0,
                 rho0=0.1, delta_rho=0.1, epochs=9, optimizer="sgd", random_state=0,
                 R=0.1, G=1, K_gen=50, temperature=0.8, strategy="static-mask"):
        super().__init__(backbone, V, hidden, window, alpha, beta, rho0, delta_rho, epochs, optimizer, random_state)
        self.R = R
        self.G = G
        self.K_gen = K_gen
        self.temperature = temperature
        self.strategy = strategy

    def _train(self, ds, params):
        online = OnlineConfig(R=self.R, G=self.G, K_gen=self.K_gen, temperature=self.temperature,
                              strategy=self.strategy)
        return train_online(self._train_config(), ds, params, online, self.random_state)


class StochasticBMO(BilevelDataSelector):
    """Weights that track ``-tau * loss`` per sample instead of a penalty gradient."""

    def __init__(self, backbone="tabular", V=None, hidden=8, window=2, alpha=10.0, beta=2.0,
                 rho0=0.1, delta_rho=0.1, epochs=9, optimizer="sgd", random_state=0,
                 alpha_track=1.0, tau=1.0):
        super().__init__(backbone, V, hidden, window, alpha, beta, rho0, delta_rho, epochs, optimizer, random_state)
        self.alpha_track = alpha_track
        self.tau = tau

    def _train_config(self):
        return dataclasses.replace(super()._train_config(), tau=self.tau)

    def _train(self, ds, params):
        return train_bmo(self._train_config(), ds, params, self.random_state, self.alpha_track)
