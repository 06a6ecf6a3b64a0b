"""Toy autoregressive backbones mapping a sample to a ``(V, D)`` logit matrix.

Three kinds share one contract: column ``d`` of the output depends on the
question and on ``y[:d]`` only (zero-based, i.e. the tokens strictly before
the one being predicted).

``tabular``
    One free logit column per (question identity, position).  The identity
    of a question is its token multiset, so reorderings of a question share
    a slot.  No parameter sharing across identities.
``linear``
    ``logits = W @ features`` where the features are one-hots of the last
    ``window`` context tokens (padded), a position one-hot and a bias.
``attention-lite``
    Token plus position embeddings, one causal self-attention head with a
    residual connection, and a linear vocabulary head.  No layer norm.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidInputError
from .sft import sft_loss, sft_loss_grad_z

__all__ = [
    "BACKBONE_KINDS",
    "BackboneSpec",
    "Params",
    "GenerationConfig",
    "init_params",
    "forward",
    "next_token_logits",
    "loss_and_grad",
    "generate",
    "greedy",
    "sample_loss",
]

BACKBONE_KINDS = ("tabular", "linear", "attention-lite")


@dataclass(frozen=True)
class BackboneSpec:
    kind: str
    V: int
    question_len: int
    response_len: int
    hidden: int = 8
    window: int = 2

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise InvalidInputError(f"unknown backbone kind {self.kind!r}; expected one of {BACKBONE_KINDS}")
        if self.V < 2:
            raise InvalidInputError("vocabulary size must be at least 2")
        if self.question_len < 1 or self.response_len < 1:
            raise InvalidInputError("question and response lengths must be positive")
        if self.hidden < 1 or self.window < 1:
            raise InvalidInputError("hidden width and window must be positive")

    @property
    def context_len(self):
        return self.question_len + self.response_len

    @cached_property
    def key_index(self):
        """Map from sorted question tuple to tabular slot index."""
        combos = itertools.combinations_with_replacement(range(self.V), self.question_len)
        return {c: i for i, c in enumerate(combos)}

    @property
    def n_keys(self):
        return math.comb(self.V + self.question_len - 1, self.question_len)

    @property
    def n_features(self):
        return self.window * (self.V + 1) + self.response_len + 1

    @cached_property
    def layout(self):
        """Ordered ``(name, shape)`` blocks of the flat parameter vector."""
        V, H = self.V, self.hidden
        if self.kind == "tabular":
            return (("table", (self.n_keys, self.response_len, V)),)
        if self.kind == "linear":
            return (("W", (V, self.n_features)),)
        T = self.context_len
        return (
            ("E", (V, H)),
            ("P", (T, H)),
            ("Wq", (H, H)),
            ("Wk", (H, H)),
            ("Wv", (H, H)),
            ("Wo", (V, H)),
            ("bo", (V,)),
        )

    @property
    def n_params(self):
        return sum(math.prod(shape) for _, shape in self.layout)

    def unpack(self, values):
        out, pos = {}, 0
        for name, shape in self.layout:
            size = math.prod(shape)
            out[name] = values[pos:pos + size].reshape(shape)
            pos += size
        return out

    def question_key(self, x):
        if len(x) != self.question_len:
            raise InvalidInputError(f"question length {len(x)} != {self.question_len}")
        try:
            return self.key_index[tuple(sorted(x))]
        except KeyError:
            raise InvalidInputError(f"question {x} has token ids outside [0, {self.V})") from None

    def to_dict(self):
        return {
            "kind": self.kind,
            "V": self.V,
            "question_len": self.question_len,
            "response_len": self.response_len,
            "hidden": self.hidden,
            "window": self.window,
        }


@dataclass(frozen=True, eq=False)
class Params:
    values: np.ndarray
    spec: BackboneSpec

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.spec.n_params,):
            raise InvalidInputError(
                f"parameter vector has shape {values.shape}, spec expects ({self.spec.n_params},)"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("parameters contain non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def replace(self, values):
        return Params(values, self.spec)

    def copy(self):
        return Params(self.values.copy(), self.spec)


@dataclass(frozen=True)
class GenerationConfig:
    max_tokens: int
    temperature: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise InvalidInputError("max_tokens must be positive")
        if not self.temperature >= 0:
            raise InvalidInputError(f"temperature must be >= 0, got {self.temperature}")


def init_params(spec, seed=0, std=0.02):
    """Zeros for tabular (uniform policy); seeded Gaussian otherwise."""
    if spec.kind == "tabular":
        return Params(np.zeros(spec.n_params), spec)
    rng = np.random.default_rng([seed, 3])
    return Params(std * rng.standard_normal(spec.n_params), spec)


def _check_sample(spec, x, y_in, n_cols):
    if n_cols > spec.response_len:
        raise InvalidInputError(
            f"response of length {n_cols} overflows the context (max {spec.response_len})"
        )
    if len(x) != spec.question_len:
        raise InvalidInputError(f"question length {len(x)} != {spec.question_len}")
    if max(x) >= spec.V or (len(y_in) and max(y_in) >= spec.V):
        raise InvalidInputError(f"token id out of range [0, {spec.V})")


# -- tabular ------------------------------------------------------------------

def _tabular_logits(spec, blocks, x, y_in, n_cols):
    return blocks["table"][spec.question_key(x), :n_cols, :].T.copy()


def _tabular_backward(spec, blocks, x, y_in, gz):
    grad = {"table": np.zeros_like(blocks["table"])}
    grad["table"][spec.question_key(x), : gz.shape[1], :] = gz.T
    return grad


# -- linear -------------------------------------------------------------------

def _linear_features(spec, x, y_in, n_cols):
    feats = np.zeros((spec.n_features, n_cols))
    ctx = list(x) + list(y_in)
    Vp = spec.V + 1
    for d in range(n_cols):
        # predicting y[d] from ctx[: len(x) + d]
        end = len(x) + d
        for w in range(spec.window):
            pos = end - 1 - w
            tok = ctx[pos] if pos >= 0 else spec.V
            feats[w * Vp + tok, d] = 1.0
        feats[spec.window * Vp + d, d] = 1.0
        feats[-1, d] = 1.0
    return feats


def _linear_logits(spec, blocks, x, y_in, n_cols):
    return blocks["W"] @ _linear_features(spec, x, y_in, n_cols)


def _linear_backward(spec, blocks, x, y_in, gz):
    feats = _linear_features(spec, x, y_in, gz.shape[1])
    return {"W": gz @ feats.T}


# -- attention-lite -------------------------------------------------------------

def _attn_forward(spec, blocks, x, y_in, n_cols):
    # inputs are x followed by the response tokens that precede the last
    # predicted position; row t of the output predicts token t + 1
    s = np.asarray(list(x) + list(y_in[: n_cols - 1]), dtype=np.int64)
    T = s.shape[0]
    H = spec.hidden
    e = blocks["E"][s] + blocks["P"][:T]
    q = e @ blocks["Wq"].T
    k = e @ blocks["Wk"].T
    v = e @ blocks["Wv"].T
    scores = (q @ k.T) / math.sqrt(H)
    scores = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    A = np.exp(scores)
    A /= A.sum(axis=1, keepdims=True)
    h = A @ v
    a = e + h
    rows = np.arange(len(x) - 1, len(x) - 1 + n_cols)
    logits = a[rows] @ blocks["Wo"].T + blocks["bo"]
    cache = dict(s=s, e=e, q=q, k=k, v=v, A=A, a=a, rows=rows)
    return logits.T, cache


def _attn_logits(spec, blocks, x, y_in, n_cols):
    return _attn_forward(spec, blocks, x, y_in, n_cols)[0]


def _attn_backward(spec, blocks, x, y_in, gz):
    _, c = _attn_forward(spec, blocks, x, y_in, gz.shape[1])
    H = spec.hidden
    e, q, k, v, A, a, rows = c["e"], c["q"], c["k"], c["v"], c["A"], c["a"], c["rows"]
    dlog = gz.T  # (n_cols, V)
    grad = {name: np.zeros(shape) for name, shape in spec.layout}
    grad["Wo"] = dlog.T @ a[rows]
    grad["bo"] = dlog.sum(axis=0)
    da = np.zeros_like(a)
    da[rows] = dlog @ blocks["Wo"]
    de = da.copy()
    dh = da
    dA = dh @ v.T
    dv = A.T @ dh
    dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
    dq = dS @ k / math.sqrt(H)
    dk = dS.T @ q / math.sqrt(H)
    grad["Wq"] = dq.T @ e
    grad["Wk"] = dk.T @ e
    grad["Wv"] = dv.T @ e
    de += dq @ blocks["Wq"] + dk @ blocks["Wk"] + dv @ blocks["Wv"]
    np.add.at(grad["E"], c["s"], de)
    grad["P"][: e.shape[0]] = de
    return grad


_LOGITS = {"tabular": _tabular_logits, "linear": _linear_logits, "attention-lite": _attn_logits}
_BACKWARD = {"tabular": _tabular_backward, "linear": _linear_backward, "attention-lite": _attn_backward}


def _logits(params, x, y_in, n_cols):
    spec = params.spec
    _check_sample(spec, x, y_in, n_cols)
    return _LOGITS[spec.kind](spec, spec.unpack(params.values), x, y_in, n_cols)


def forward(params, sample):
    """Logit matrix ``(V, D)`` for ``sample`` under the causal contract."""
    return _logits(params, sample.x, sample.y, len(sample.y))


def next_token_logits(params, x, y_prefix):
    """Logits for the token following ``y_prefix``."""
    y_prefix = tuple(y_prefix)
    return _logits(params, tuple(x), y_prefix, len(y_prefix) + 1)[:, -1]


def loss_and_grad(params, sample):
    """SFT loss of ``sample`` and its gradient in the flat parameter vector."""
    spec = params.spec
    z = forward(params, sample)
    loss = sft_loss(z, sample.y)
    gz = sft_loss_grad_z(z, sample.y)
    blocks = spec.unpack(params.values)
    grads = _BACKWARD[spec.kind](spec, blocks, sample.x, sample.y, gz)
    flat = np.concatenate([np.asarray(grads[name]).reshape(-1) for name, _ in spec.layout])
    return loss, flat


def sample_loss(params, sample):
    return sft_loss(forward(params, sample), sample.y)


def generate(params, x, cfg, rng=None):
    """Autoregressive sampling of ``cfg.max_tokens`` tokens.

    Temperature 0 is greedy decoding with ties going to the lowest token id.
    ``rng`` defaults to a generator seeded from ``cfg.seed``.
    """
    if not cfg.temperature >= 0:
        raise InvalidInputError(f"temperature must be >= 0, got {cfg.temperature}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x = tuple(int(t) for t in x)
    y = []
    for _ in range(cfg.max_tokens):
        logits = next_token_logits(params, x, y)
        if cfg.temperature == 0:
            tok = int(np.argmax(logits))
        else:
            scaled = logits / cfg.temperature
            p = np.exp(scaled - scaled.max())
            p /= p.sum()
            tok = int(rng.choice(p.shape[0], p=p))
        y.append(tok)
    return tuple(y)


def greedy(params, x, max_tokens):
    return generate(params, x, GenerationConfig(max_tokens=max_tokens, temperature=0.0))
