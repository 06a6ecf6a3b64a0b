"""Online self-refinement: masked questions train on the model's own generations.

A masked subset of SFT questions has its offline response replaced by
``G`` responses sampled from a periodically refreshed old policy.  Between
refreshes the stale samples are reweighted by ``pi_theta / pi_old``.  The
unmasked path is exactly the offline penalty step.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .backbone import GenerationConfig, Params, generate, greedy, loss_and_grad, sample_loss
from .errors import InvalidConfigError, InvalidInputError, RatioOverflowError
from .offline import TrainConfig, TrainResult, TrainState, make_row, pbgd_step, penalty_update, run_loop
from .sft import TokenSample

__all__ = [
    "OnlineConfig",
    "MaskSet",
    "GenerationBuffer",
    "PolicySnapshot",
    "STRATEGIES",
    "mask_size",
    "static_mask",
    "dynamic_mask_update",
    "refresh_generations",
    "importance_ratio",
    "is_weighted_sft_grad",
    "online_step",
    "generation_match_rate",
    "train_online",
]

STRATEGIES = ("static-mask", "dynamic-mask")
# exp() overflows a double a little above 709
_MAX_LOG_RATIO = 700.0


def mask_size(R, N):
    """``round(R * N)`` with halves rounded up."""
    return int(math.floor(R * N + 0.5))


@dataclass(frozen=True)
class OnlineConfig:
    """Knobs of the online loop.

    ``split_normalization`` rescales the SFT term by ``N / (N - N_M)`` on
    unmasked steps and ``N / N_M`` on masked ones, i.e. the per-group
    averages of the split objective with the global ``1/N`` folded into
    ``gamma``.  Off by default so that an empty mask reproduces the offline
    run exactly.
    """

    R: float = 0.1
    G: int = 1
    K_gen: int = 50
    temperature: float = 0.8
    strategy: str = "static-mask"
    clip: float | None = None
    split_normalization: bool = False

    def __post_init__(self):
        if not 0 <= self.R < 1:
            raise InvalidConfigError("mask ratio R must lie in [0, 1)", key="online.R")
        if int(self.G) != self.G or self.G < 1:
            raise InvalidConfigError("G must be a positive integer", key="online.G")
        if int(self.K_gen) != self.K_gen or self.K_gen < 1:
            raise InvalidConfigError("K_gen must be a positive integer", key="online.K_gen")
        if not self.temperature >= 0:
            raise InvalidConfigError("temperature must be >= 0", key="online.temperature")
        if self.strategy not in STRATEGIES:
            raise InvalidConfigError(f"unknown strategy {self.strategy!r}", key="online.strategy")
        if self.clip is not None and not self.clip > 1:
            raise InvalidConfigError("ratio clip must exceed 1", key="online.clip")


@dataclass(frozen=True)
class MaskSet:
    indices: tuple
    N: int

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        if len(set(idx)) != len(idx):
            raise InvalidInputError("mask indices must be unique")
        if idx and not (0 <= idx[0] and idx[-1] < self.N):
            raise InvalidInputError(f"mask indices must lie in [0, {self.N})")
        object.__setattr__(self, "indices", idx)

    @property
    def R(self):
        return len(self.indices) / self.N if self.N else 0.0

    def __contains__(self, i):
        return i in self._lookup

    def __len__(self):
        return len(self.indices)

    @property
    def _lookup(self):
        return frozenset(self.indices)


def static_mask(N, R, seed=0):
    """A fixed random mask of ``round(R N)`` questions drawn from the mask stream."""
    k = mask_size(R, N)
    if k == 0:
        return MaskSet((), N)
    rng = np.random.default_rng([seed, 1])
    return MaskSet(tuple(int(i) for i in rng.choice(N, size=k, replace=False)), N)


def dynamic_mask_update(weights, R):
    """Bottom-``round(R N)`` weights; ties go to the smaller index."""
    if not 0 < R < 1:
        raise InvalidInputError(f"mask ratio must lie in (0, 1), got {R}")
    w = np.asarray(weights.weights)
    k = mask_size(R, w.shape[0])
    order = np.lexsort((np.arange(w.shape[0]), w))
    return MaskSet(tuple(int(i) for i in order[:k]), w.shape[0])


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    params: Params
    step: int


@dataclass(frozen=True, eq=False)
class GenerationBuffer:
    """``entries[i]`` is a tuple of ``(response, old_logprob)`` pairs, G per question."""

    entries: dict
    G: int
    snapshot: PolicySnapshot

    def __post_init__(self):
        for i, e in self.entries.items():
            if len(e) != self.G:
                raise InvalidInputError(f"question {i} has {len(e)} generations, expected {self.G}")

    def targets(self, question, i):
        return tuple(TokenSample(question, y) for y, _ in self.entries[i])

    def to_jsonl(self, fh):
        for i in sorted(self.entries):
            for g, (y, lp) in enumerate(self.entries[i]):
                rec = {"question_index": i, "g": g, "tokens": list(y),
                       "old_logprob": lp, "snapshot_step": self.snapshot.step}
                fh.write(json.dumps(rec) + "\n")


def refresh_generations(params, mask, G, gen_cfg, questions, refresh=0, step=0):
    """Sample ``G`` responses per masked question and cache their log-probs.

    Each question draws from its own stream ``(gen_cfg.seed, 2, i, refresh)``
    so the result does not depend on the order questions are visited.
    """
    if G < 1:
        raise InvalidInputError("G must be >= 1")
    entries = {}
    for i in mask.indices:
        x = questions[i]
        rng = np.random.default_rng([gen_cfg.seed, 2, i, refresh])
        row = []
        for _ in range(G):
            y = generate(params, x, gen_cfg, rng)
            row.append((y, -sample_loss(params, TokenSample(x, y))))
        entries[i] = tuple(row)
    return GenerationBuffer(entries, G, PolicySnapshot(params, step))


def importance_ratio(cur_logprob, old_logprob, sample=None):
    if not (np.isfinite(cur_logprob) and np.isfinite(old_logprob)):
        raise InvalidInputError("log-probs must be finite")
    diff = float(cur_logprob) - float(old_logprob)
    if diff > _MAX_LOG_RATIO:
        raise RatioOverflowError(f"importance ratio exp({diff:.1f}) overflows", sample=sample)
    return math.exp(diff)


def is_weighted_sft_grad(params, question, entries, clip=None, index=None):
    """``(1/G) sum_g r^g grad L(y^g)`` with ``r^g = pi_theta(y^g) / pi_old(y^g)``."""
    if not entries:
        raise InvalidInputError("no generations for this question")
    total = np.zeros(params.values.shape)
    for g, (y, old_lp) in enumerate(entries):
        loss, grad = loss_and_grad(params, TokenSample(question, y))
        r = importance_ratio(-loss, old_lp, sample=(index, g))
        if clip is not None:
            r = min(max(r, 1.0 / clip), clip)
        total += r * grad
    return total / len(entries)


def _split_scales(N, n_masked, enabled):
    if not enabled or n_masked == 0:
        return 1.0, 1.0
    off = N / (N - n_masked)
    return off, N / n_masked


def online_step(state, val_sample, sft_sample, i_k, buffer, mask, gamma, cfg, online):
    """One step of the online loop.  Unmasked indices take the offline step."""
    N = state.weights.N
    scale_off, scale_on = _split_scales(N, len(mask), online.split_normalization)
    if i_k not in mask:
        return pbgd_step(state, val_sample, sft_sample, i_k, gamma, cfg, scale=scale_off)
    x = sft_sample.x
    entries = buffer.entries[i_k]
    _, val_grad = loss_and_grad(state.params, val_sample)
    sft_grad = is_weighted_sft_grad(state.params, x, entries, clip=online.clip, index=i_k)
    targets = buffer.targets(x, i_k)

    # the weight coefficient is the plain mean over stale generations
    def coefficient(p):
        return float(np.mean([sample_loss(p, t) for t in targets]))

    return penalty_update(state, val_grad, sft_grad, i_k, coefficient, gamma, cfg, scale_on)


def generation_match_rate(params, questions, indices, reference, max_tokens):
    """Fraction of the given questions whose greedy decode equals the reference answer."""
    if not indices:
        return math.nan
    hits = 0
    for i in indices:
        x = questions[i]
        if x not in reference:
            raise InvalidInputError(f"no reference response for question {x}")
        hits += greedy(params, x, max_tokens) == tuple(reference[x])
    return hits / len(indices)


def train_online(cfg: TrainConfig, datasets, params, online=None, seed=0, sink=None, on_refresh=None):
    """Algorithm-1 loop on top of the offline epoch schedule.

    The first refresh happens before step 0, then every ``K_gen`` steps.  A
    dynamic strategy re-ranks the mask at each refresh.  ``on_refresh``
    receives every new buffer (e.g. to dump it).
    """
    online = online or OnlineConfig()
    datasets.require("sft", "val")
    N = datasets.N
    questions = [s.x for s in datasets.sft]
    D = params.spec.response_len
    gen_cfg = GenerationConfig(max_tokens=D, temperature=online.temperature, seed=seed)
    ctx = {"mask": static_mask(N, online.R, seed), "buffer": None, "refreshes": 0}
    dynamic = online.strategy == "dynamic-mask" and mask_size(online.R, N) > 0

    def refresh(state):
        if dynamic:
            ctx["mask"] = dynamic_mask_update(state.weights, online.R)
        ctx["buffer"] = refresh_generations(state.params, ctx["mask"], online.G, gen_cfg, questions,
                                            refresh=ctx["refreshes"], step=state.step)
        ctx["refreshes"] += 1
        if on_refresh is not None:
            on_refresh(ctx["buffer"])

    def on_step(state, k):
        if k > 0 and k % online.K_gen == 0:
            refresh(state)

    def step_fn(state, j, i, gamma):
        return online_step(state, datasets.val[j], datasets.sft[i], i, ctx["buffer"], ctx["mask"],
                           gamma, cfg, online)

    def row_fn(state, gamma):
        mask, buf = ctx["mask"], ctx["buffer"]
        targets = list(datasets.sft)
        if buf is not None:
            for i in mask.indices:
                targets[i] = buf.targets(questions[i], i)
        rate = generation_match_rate(state.params, questions, mask.indices, datasets.reference, D)
        return make_row(state, datasets, gamma, sft_targets=targets, extra={"match_rate": rate})

    state = TrainState.initial(params, N)
    refresh(state)
    state, metrics = run_loop(cfg, datasets, params, seed, step_fn, row_fn=row_fn, sink=sink,
                              on_step=on_step, state=state)
    return TrainResult(state.params, state.weights, metrics)
