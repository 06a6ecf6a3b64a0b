"""Synthetic instances with known useful/useless labels, and brute-force checks.

Instances use a clean rule ``f(x)_d = (sum(x) + d) mod V`` for validation and
useful samples and a corrupt rule ``g`` (the clean rule shifted by a fixed
nonzero offset) for useless ones.  Useless samples reuse validation
questions, so under the tabular backbone their individual minimisers cannot
meet the validation minimisers.  Evaluation questions are reorderings of
validation questions: distinct samples drawn from the same rule that a
tabular backbone keyed on the question multiset can still score.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneSpec, Params, loss_and_grad, sample_loss
from .bmo import ObjectiveVector
from .data import USEFUL, USELESS, Datasets
from .errors import InvalidInputError, ResourceLimitError
from .offline import dataset_loss, pbgd_step
from .sft import TokenSample
from .weights import removal_threshold

__all__ = [
    "SyntheticInstance",
    "clean_rule",
    "gen_synthetic_instance",
    "recompute_labels",
    "CANONICAL",
    "canonical_instance",
    "GridOracle",
    "brute_pareto_front",
    "scalarization_union",
    "simplex_weights",
    "biquadratic_toy",
    "separable_tabular_toy",
    "verify_selection",
    "verify_improvement",
    "verify_expected_update",
]

MAX_GRID_POINTS = 1_000_000


def clean_rule(x, D, V, offset=0):
    s = sum(x)
    return tuple((s + d + offset) % V for d in range(1, D + 1))


@dataclass(frozen=True)
class SyntheticInstance:
    datasets: Datasets
    spec: BackboneSpec
    offset: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def labels(self):
        return self.datasets.labels

    def clean(self, x):
        return clean_rule(x, self.spec.response_len, self.spec.V)

    def corrupt(self, x):
        return clean_rule(x, self.spec.response_len, self.spec.V, self.offset)


def _key(x):
    return tuple(sorted(x))


def recompute_labels(sft, val):
    """Label by the conflict rule: useless iff a validation sample on the same
    question identity exists and the responses differ at some position."""
    val_by_key = {}
    for v in val:
        val_by_key.setdefault(_key(v.x), set()).add(v.y)
    labels = []
    for s in sft:
        responses = val_by_key.get(_key(s.x), set())
        labels.append(USELESS if any(r != s.y for r in responses) else USEFUL)
    return tuple(labels)


def gen_synthetic_instance(
    V=8,
    L_x=2,
    D=3,
    n_sft=40,
    n_val=12,
    useless_fraction=0.3,
    backbone="tabular",
    seed=0,
    n_eval=None,
    offset=None,
    hidden=8,
    window=2,
):
    """Build an instance with certified labels.

    ``n_eval`` defaults to ``n_val`` (one reordered question per validation
    question) when ``L_x >= 2`` and to 0 otherwise.  ``offset`` defaults to
    ``V // 2``.
    """
    if not 0 <= useless_fraction < 1:
        raise InvalidInputError("useless_fraction must lie in [0, 1)")
    if V < 2 or L_x < 1 or D < 1 or n_sft < 1 or n_val < 1:
        raise InvalidInputError("sizes must be positive and V >= 2")
    offset = V // 2 if offset is None else int(offset)
    if offset % V == 0:
        raise InvalidInputError("corrupt-rule offset must be nonzero mod V")
    orderings = math.factorial(L_x)
    if n_eval is None:
        n_eval = n_val if L_x >= 2 else 0
    n_keys = math.comb(V, L_x) if L_x >= 2 else V
    if n_val > n_keys:
        raise InvalidInputError(
            f"infeasible sizes: {n_val} validation questions requested but only {n_keys} "
            f"distinct-token questions exist for V={V}, L_x={L_x}"
        )
    if n_eval > n_val * (orderings - 1):
        raise InvalidInputError(
            f"infeasible sizes: {n_eval} held-out questions need more reorderings than "
            f"{n_val} validation questions of length {L_x} provide"
        )
    rng = np.random.default_rng([seed, 7])
    spec = BackboneSpec(backbone, V, L_x, D, hidden=hidden, window=window)

    all_keys = list(itertools.combinations(range(V), L_x))
    chosen = rng.choice(len(all_keys), size=n_val, replace=False)
    val_q = []
    for idx in chosen:
        key = all_keys[idx]
        val_q.append(tuple(int(t) for t in rng.permutation(key)))
    val = tuple(TokenSample(q, clean_rule(q, D, V)) for q in val_q)

    eval_q = []
    if n_eval:
        pools = []
        for q in val_q:
            others = [p for p in itertools.permutations(sorted(q)) if p != q]
            pools.append([others[k] for k in rng.permutation(len(others))])
        order = rng.permutation(n_val)
        r = 0
        while len(eval_q) < n_eval:
            for i in order:
                if r < len(pools[i]) and len(eval_q) < n_eval:
                    eval_q.append(tuple(int(t) for t in pools[i][r]))
            r += 1
    evals = tuple(TokenSample(q, clean_rule(q, D, V)) for q in eval_q)

    n_useless = int(round(useless_fraction * n_sft))
    useless_order = rng.permutation(n_val)
    sft, labels = [], []
    for k in range(n_useless):
        q = val_q[int(useless_order[k % n_val])]
        sft.append(TokenSample(q, clean_rule(q, D, V, offset)))
        labels.append(USELESS)
    for _ in range(n_sft - n_useless):
        q = val_q[int(rng.integers(n_val))]
        sft.append(TokenSample(q, clean_rule(q, D, V)))
        labels.append(USEFUL)
    perm = rng.permutation(n_sft)
    sft = tuple(sft[p] for p in perm)
    labels = tuple(labels[p] for p in perm)

    reference = {}
    for s in (*sft, *val, *evals):
        reference[s.x] = clean_rule(s.x, D, V)
    datasets = Datasets(sft=sft, val=val, eval=evals, labels=labels, reference=reference)
    meta = dict(V=V, L_x=L_x, D=D, n_sft=n_sft, n_val=n_val, n_eval=n_eval,
                useless_fraction=useless_fraction, backbone=backbone, offset=offset, seed=seed,
                # only the tabular family has disjoint per-question parameters
                label_provenance="exact" if backbone == "tabular" else "approximate")
    return SyntheticInstance(datasets=datasets, spec=spec, offset=offset, seed=seed, meta=meta)


CANONICAL = dict(V=8, L_x=2, D=3, n_sft=40, n_val=12, useless_fraction=0.3, backbone="tabular")


def canonical_instance(seed=0, **overrides):
    kw = dict(CANONICAL)
    kw.update(overrides)
    return gen_synthetic_instance(seed=seed, **kw)


@dataclass(eq=False)
class GridOracle:
    """Regular grid over a small parameter box, with cached objective values.

    ``resolution`` is the spacing; the grid always includes both box ends
    when the box width is a multiple of it.
    """

    lows: tuple
    highs: tuple
    resolution: float
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.lows = tuple(float(v) for v in np.atleast_1d(self.lows))
        self.highs = tuple(float(v) for v in np.atleast_1d(self.highs))
        if len(self.lows) != len(self.highs) or not self.lows:
            raise InvalidInputError("box bounds need matching, nonempty dimensions")
        if not self.resolution > 0 or any(h < l for l, h in zip(self.lows, self.highs)):
            raise InvalidInputError("need a positive resolution and lows <= highs")
        counts = [int(round((h - l) / self.resolution)) + 1 for l, h in zip(self.lows, self.highs)]
        total = math.prod(counts)
        if total > MAX_GRID_POINTS:
            raise ResourceLimitError(f"grid has {total} points, limit is {MAX_GRID_POINTS}")
        axes = [l + self.resolution * np.arange(c) for l, c in zip(self.lows, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.points = np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def size(self):
        return self.points.shape[0]

    def losses(self, objectives):
        """``(n_points, M)`` matrix of objective values, computed once per objective vector."""
        key = id(objectives)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not objectives:
            F = np.array([objectives.values(p) for p in self.points])
            hit = (objectives, F)
            self._cache[key] = hit
        return hit[1]


def _not_dominated(F):
    """Mask of rows of ``F`` that no other row beats strictly in every column."""
    P, M = F.shape
    if M == 1:
        return F[:, 0] == F[:, 0].min()
    if M == 2:
        keep = np.ones(P, dtype=bool)
        order = np.lexsort((F[:, 1], F[:, 0]))
        best = math.inf  # smallest f2 among rows with strictly smaller f1
        k = 0
        while k < P:
            g = k
            f1 = F[order[k], 0]
            while g < P and F[order[g], 0] == f1:
                g += 1
            block = order[k:g]
            keep[block] = ~(F[block, 1] > best)
            best = min(best, float(F[block, 1].min()))
            k = g
        return keep
    keep = np.ones(P, dtype=bool)
    chunk = max(1, 2_000_000 // (P * M))
    for start in range(0, P, chunk):
        rows = F[start:start + chunk]
        beaten = np.all(F[None, :, :] < rows[:, None, :], axis=2).any(axis=1)
        keep[start:start + chunk] = ~beaten
    return keep


def brute_pareto_front(objectives, grid):
    """Indices of grid points that are weakly Pareto optimal on the grid."""
    F = grid.losses(objectives)
    return frozenset(int(i) for i in np.flatnonzero(_not_dominated(F)))


def simplex_weights(M, n_interior=101, seed=0):
    """The ``M`` simplex vertices plus ``n_interior`` interior points.

    For two objectives the interior points are evenly spaced; otherwise they
    are Dirichlet(1) draws.
    """
    verts = list(np.eye(M))
    if M == 1:
        return verts
    if M == 2:
        ts = np.arange(1, n_interior + 1) / (n_interior + 1)
        inner = [np.array([t, 1 - t]) for t in ts]
    else:
        inner = list(np.random.default_rng([seed, 11]).dirichlet(np.ones(M), size=n_interior))
    return verts + inner


def scalarization_union(objectives, grid, weight_samples):
    """Union over the weight samples of the grid argmin sets of the weighted sums."""
    F = grid.losses(objectives)
    out = set()
    for w in weight_samples:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (F.shape[1],) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise InvalidInputError("weight samples must be simplex vectors of length M")
        s = F @ w
        out.update(int(i) for i in np.flatnonzero(s == s.min()))
    return frozenset(out)


def biquadratic_toy(a=0.0, b=1.0, low=-1.0, high=2.0, resolution=0.01):
    """``(theta - a)^2`` and ``(theta - b)^2`` on a 1-D grid; the front is ``[a, b]``."""
    objectives = ObjectiveVector([lambda t: float((t[0] - a) ** 2), lambda t: float((t[0] - b) ** 2)])
    return objectives, GridOracle((low,), (high,), resolution)


def separable_tabular_toy(bound=8.0, resolution=0.5):
    """Two single-token samples on a 2-D slice of a tabular backbone.

    Coordinate 0 is the logit of the correct token for question 0, coordinate
    1 the same for question 1.  Both losses fall below ``1e-3`` at the box
    corner ``(bound, bound)``, so the pair is separable on the box.
    """
    spec = BackboneSpec("tabular", V=2, question_len=1, response_len=1)
    samples = (TokenSample((0,), (1,)), TokenSample((1,), (0,)))
    slots = []
    for s in samples:
        flat = np.zeros(spec.n_params)
        table = flat.reshape(spec.n_keys, 1, 2)
        table[spec.question_key(s.x), 0, s.y[0]] = 1.0
        slots.append(flat)
    basis = np.stack(slots, axis=1)

    def embed(theta):
        return Params(basis @ np.asarray(theta, dtype=np.float64), spec)

    def loss_m(m):
        return lambda theta: sample_loss(embed(theta), samples[m])

    def grad_m(m):
        return lambda theta: basis.T @ loss_and_grad(embed(theta), samples[m])[1]

    objectives = ObjectiveVector([loss_m(0), loss_m(1)], [grad_m(0), grad_m(1)])
    grid = GridOracle((-bound, -bound), (bound, bound), resolution)
    return objectives, grid, embed


def _report(status, **values):
    return {"status": status, "pass": status != "fail", **values}


def verify_selection(weights, labels, eps_w=None, factor=5.0):
    """Every useless weight below ``eps_w`` and useful mean ``>= factor`` times useless mean."""
    labels = tuple(labels.labels) if isinstance(labels, (Datasets, SyntheticInstance)) else tuple(labels)
    w = np.asarray(weights.weights)
    if len(labels) != w.shape[0]:
        raise InvalidInputError(f"{w.shape[0]} weights but {len(labels)} labels")
    eps_w = removal_threshold(len(labels)) if eps_w is None else eps_w
    useless = np.array([lab == USELESS for lab in labels])
    if not useless.any() or useless.all():
        return _report("precondition-unmet", eps_w=eps_w)
    mu_useless = float(w[useless].mean())
    mu_useful = float(w[~useless].mean())
    worst = float(w[useless].max())
    ratio = math.inf if mu_useless == 0 else mu_useful / mu_useless
    ok = worst < eps_w and ratio >= factor
    return _report("pass" if ok else "fail", max_useless=worst, mean_useless=mu_useless,
                   mean_useful=mu_useful, ratio=ratio, eps_w=eps_w,
                   min_useful=float(w[~useless].min()))


def verify_improvement(bds_runs, mixing_runs, datasets, min_margin=0.0):
    """Per-seed strict ordering of final losses, BDS below every mixing run.

    ``bds_runs[s]`` and ``mixing_runs[rho][s]`` are results for seed ``s``
    trained on ``datasets[s]``.  Checked on the validation and evaluation
    splits.  ``min_margin`` additionally demands a relative gap
    ``(mix - bds) / mix`` of at least that size.
    """
    n = len(bds_runs)
    if len(datasets) != n or any(len(r) != n for r in mixing_runs.values()):
        raise InvalidInputError("every run list must cover the same seeds")
    if not mixing_runs:
        raise InvalidInputError("need at least one mixing setting")
    if any(ds.useless_mask() is None or not ds.useless_mask().any() for ds in datasets):
        return _report("precondition-unmet")
    detail = []
    ok = True
    for s in range(n):
        ds = datasets[s]
        ds.require("val", "eval")
        b_val, b_eval = dataset_loss(bds_runs[s].params, ds.val), dataset_loss(bds_runs[s].params, ds.eval)
        for rho, runs in sorted(mixing_runs.items()):
            m_val, m_eval = dataset_loss(runs[s].params, ds.val), dataset_loss(runs[s].params, ds.eval)
            margin = min((m_val - b_val) / m_val, (m_eval - b_eval) / m_eval)
            good = b_val < m_val and b_eval < m_eval and margin >= min_margin
            ok &= good
            detail.append(dict(seed_index=s, rho_mix=rho, bds_val=b_val, mix_val=m_val,
                               bds_eval=b_eval, mix_eval=m_eval, margin=margin, ok=bool(good)))
    worst = min(d["margin"] for d in detail)
    return _report("pass" if ok else "fail", min_margin=worst, required_margin=min_margin, runs=detail)


def verify_expected_update(state, datasets, gamma, cfg, tol=1e-8, max_n=200):
    """Average the one-step weight logits over every SFT index and compare with the closed form.

    The validation gradient is fixed to its full-batch value so that the
    only randomness left is the SFT index.
    """
    N = datasets.N
    if N > max_n:
        raise ResourceLimitError(f"enumeration over {N} samples exceeds the limit of {max_n}")
    if cfg.optimizer != "sgd":
        raise InvalidInputError("the closed form holds for plain SGD steps only")
    datasets.require("sft", "val")
    val_grad = np.mean([loss_and_grad(state.params, v)[1] for v in datasets.val], axis=0)
    omega = np.asarray(state.weights.logits)
    sigma = np.asarray(state.weights.weights)
    enum = np.zeros(N)
    C = np.zeros(N)
    for m in range(N):
        nxt = pbgd_step(state, None, datasets.sft[m], m, gamma, cfg, val_grad=val_grad)
        enum += nxt.weights.logits
        C[m] = sample_loss(nxt.params, datasets.sft[m])
    enum /= N
    closed = omega + (cfg.alpha * gamma * sigma / N) * (sigma @ C - C)
    diff = float(np.max(np.abs(enum - closed)))
    return _report("pass" if diff < tol else "fail", value=diff, tolerance=tol)
