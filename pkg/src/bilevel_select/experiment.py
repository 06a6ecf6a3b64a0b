"""Run orchestration behind the CLI: instances, training dispatch, the verification suite."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, init_params
from .bmo import merit_exact, merit_separable, train_bmo
from .config import TRAIN_MODES, dump_config
from .errors import InvalidConfigError, InvalidInputError
from .io import MetricsWriter, load_dataset, save_checkpoint, write_report, write_weights
from .offline import METRICS_FIELDS, TrainState, dataset_loss, train_offline
from .online import train_online
from .theory import (
    biquadratic_toy,
    brute_pareto_front,
    gen_synthetic_instance,
    recompute_labels,
    scalarization_union,
    separable_tabular_toy,
    simplex_weights,
    verify_expected_update,
    verify_improvement,
    verify_selection,
)
from .weights import WeightState

__all__ = ["OUTPUT_ROOT_ENV", "output_root", "run_dir_for", "build_instance", "train_once",
           "metrics_fields", "verification_suite", "run_experiment"]

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "BILEVEL_SELECT_OUTPUT_ROOT"


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_dir_for(cfg):
    """``output_dir`` when set, else ``$OUTPUT_ROOT/<mode>``."""
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return output_root() / cfg.mode


def build_instance(cfg, seed):
    """Datasets and backbone spec for one seed (a JSONL file or a generated instance)."""
    inst = cfg.instance
    if inst.path:
        ds = load_dataset(inst.path, V=inst.V, require=("sft", "val"))
        lengths = {len(s.x) for s in ds.sft + ds.val + ds.eval}
        if len(lengths) != 1:
            raise InvalidInputError(f"{inst.path}: all questions must share one length, found {sorted(lengths)}")
        D = max(len(s.y) for s in ds.sft + ds.val + ds.eval)
        spec = BackboneSpec(inst.backbone, inst.V, lengths.pop(), D, hidden=inst.hidden, window=inst.window)
        return ds, spec
    made = gen_synthetic_instance(
        V=inst.V, L_x=inst.L_x, D=inst.D, n_sft=inst.n_sft, n_val=inst.n_val,
        useless_fraction=inst.useless_fraction, backbone=inst.backbone,
        seed=seed if inst.seed is None else inst.seed, n_eval=inst.n_eval, offset=inst.offset,
        hidden=inst.hidden, window=inst.window,
    )
    return made.datasets, made.spec


def metrics_fields(mode):
    if mode in ("online-static", "online-dynamic"):
        return METRICS_FIELDS + ("match_rate",)
    if mode == "bmo-stochastic":
        return METRICS_FIELDS + ("lambda_gap",)
    return METRICS_FIELDS


def train_once(cfg, datasets, spec, seed, sink=None, on_refresh=None):
    """Dispatch one training run for ``cfg.mode``."""
    params = init_params(spec, seed)
    mode = cfg.mode
    if mode == "offline-bds":
        return train_offline(cfg.train, datasets, params, "bds", seed, sink)
    if mode == "offline-mixing":
        return train_offline(cfg.train, datasets, params, "mixing", seed, sink)
    if mode in ("online-static", "online-dynamic"):
        return train_online(cfg.train, datasets, params, cfg.online_config(), seed, sink, on_refresh)
    if mode == "bmo-stochastic":
        return train_bmo(cfg.train, datasets, params, seed, cfg.bmo.alpha_track, sink)
    raise InvalidConfigError(f"mode {mode!r} does not train", key="mode")


def _run_training(cfg, run_dir):
    summary = {}
    for seed in cfg.seeds:
        ds, spec = build_instance(cfg, seed)
        seed_dir = run_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        buffers = None
        if cfg.mode.startswith("online"):
            buffers = open(seed_dir / "buffers.jsonl", "w")
        try:
            with MetricsWriter(seed_dir / "metrics.csv", metrics_fields(cfg.mode)) as sink:
                res = train_once(cfg, ds, spec, seed, sink,
                                 on_refresh=(lambda b: b.to_jsonl(buffers)) if buffers else None)
        finally:
            if buffers:
                buffers.close()
        step = res.metrics[-1].step if res.metrics else 0
        save_checkpoint(seed_dir / "checkpoint.json", res.params, res.weights, step)
        write_weights(seed_dir / "weights.csv", res.weights, step)
        final = res.metrics[-1].as_dict() if res.metrics else {}
        final["eval_loss"] = dataset_loss(res.params, ds.eval)
        summary[str(seed)] = final
    (run_dir / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return 0, summary


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _check(ok, value, tolerance, **extra):
    return {"pass": bool(ok), "value": value, "tolerance": tolerance, **extra}


def verification_suite(cfg):
    """All theory checks for the configured instance family and seeds.

    Returns ``{check_name: {pass, value, tolerance, ...}}``.
    """
    v = cfg.verify
    checks = {}
    bds, mixing, bmo, datasets = [], {r: [] for r in v.rho_mix}, [], []
    label_ok = True
    for seed in cfg.seeds:
        ds, spec = build_instance(cfg, seed)
        datasets.append(ds)
        if ds.labels is not None:
            label_ok &= recompute_labels(ds.sft, ds.val) == ds.labels
        train = cfg.train
        p0 = init_params(spec, seed)
        bds.append(train_offline(train, ds, p0, "bds", seed))
        for r in v.rho_mix:
            mixing[r].append(train_offline(dataclasses.replace(train, rho_mix=r), ds, p0, "mixing", seed))
        bmo.append(train_bmo(train, ds, p0, seed, cfg.bmo.alpha_track))
    checks["label_soundness"] = _check(label_ok, float(label_ok), None)

    sel = [verify_selection(b.weights, ds.labels, v.eps_w) for b, ds in zip(bds, datasets) if ds.labels is not None]
    if sel:
        worst = max(r.get("max_useless", 0.0) for r in sel)
        checks["selection"] = _check(all(r["pass"] for r in sel), worst, sel[0]["eps_w"],
                                     status=[r["status"] for r in sel])
    if all(ds.eval for ds in datasets) and all(ds.labels is not None for ds in datasets):
        imp = verify_improvement(bds, mixing, datasets, min_margin=v.min_margin)
        checks["improvement"] = _check(imp["pass"], imp.get("min_margin", math.nan), v.min_margin,
                                       status=imp["status"])

    rel = [abs(dataset_loss(a.params, ds.val) - dataset_loss(b.params, ds.val)) / dataset_loss(a.params, ds.val)
           for a, b, ds in zip(bds, bmo, datasets)]
    checks["bds_bmo_agreement"] = _check(max(rel) < v.bmo_tolerance, max(rel), v.bmo_tolerance)

    small = gen_synthetic_instance(n_sft=8, n_val=4, seed=cfg.seeds[0])
    rng = np.random.default_rng([cfg.seeds[0], 13])
    diffs = []
    sgd = dataclasses.replace(cfg.train, optimizer="sgd")
    for _ in range(v.update_states):
        p = init_params(small.spec).replace(rng.standard_normal(small.spec.n_params))
        state = TrainState(p, WeightState.from_logits(rng.standard_normal(8)))
        diffs.append(verify_expected_update(state, small.datasets, float(rng.uniform(0.1, 2.0)), sgd)["value"])
    checks["expected_update"] = _check(max(diffs) < 1e-8, max(diffs), 1e-8)

    objectives, grid = biquadratic_toy()
    front = brute_pareto_front(objectives, grid)
    union = scalarization_union(objectives, grid, simplex_weights(2, 101))
    coverage = len(union & front) / len(front)
    checks["scalarization_front"] = _check(union <= front and coverage >= v.front_coverage, coverage,
                                           v.front_coverage, subset=union <= front)

    objectives, grid, _ = separable_tabular_toy()
    gap = 0.0
    for theta in np.random.default_rng([cfg.seeds[0], 17]).uniform(-8, 8, size=(10, 2)):
        gap = max(gap, abs(merit_separable(objectives.values(theta)) - merit_exact(theta, grid.points, objectives)))
    tol = grid.resolution + 2 * cfg.train.eps_sep
    checks["merit_separable"] = _check(gap < tol, gap, tol)
    return checks


def run_experiment(cfg, run_dir=None):
    """Run ``cfg`` into ``run_dir``.  Returns ``(exit_code, payload)``."""
    run_dir = Path(run_dir) if run_dir is not None else run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "effective_config.yaml").write_text(dump_config(cfg))
    if cfg.mode in TRAIN_MODES:
        return _run_training(cfg, run_dir)
    checks = verification_suite(cfg)
    doc = write_report(run_dir / "report.json", checks)
    return (0 if all(c["pass"] for c in checks.values()) else 1), doc
