"""Dataset JSONL, metrics CSV, JSON checkpoints and reports."""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, Params
from .data import SPLITS, USEFUL, USELESS, Datasets
from .errors import InvalidInputError
from .sft import TokenSample
from .weights import WeightState

__all__ = [
    "dataset_records",
    "write_dataset",
    "load_dataset",
    "MetricsWriter",
    "read_metrics",
    "write_weights",
    "save_checkpoint",
    "load_checkpoint",
    "write_report",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def dataset_records(datasets):
    """One dict per sample: ``x``, ``y``, ``split`` and, for SFT samples with labels, ``label``."""
    out = []
    for split in SPLITS:
        for k, s in enumerate(getattr(datasets, split)):
            rec = {"x": list(s.x), "y": list(s.y), "split": split}
            if split == "sft" and datasets.labels is not None:
                rec["label"] = datasets.labels[k]
            out.append(rec)
    return out


def write_dataset(datasets, path):
    with open(path, "w") as fh:
        for rec in dataset_records(datasets):
            fh.write(json.dumps(rec) + "\n")


def _token_list(rec, name, where):
    v = rec.get(name)
    if not isinstance(v, list) or not v or not all(isinstance(t, int) and not isinstance(t, bool) for t in v):
        raise InvalidInputError(f"{where}: field {name!r} must be a nonempty list of integers")
    return v


def load_dataset(path, V=None, require=()):
    """Read a JSONL dataset.  Errors name the offending line."""
    splits = {name: [] for name in SPLITS}
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{where}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise InvalidInputError(f"{where}: record must be an object")
            extra = set(rec) - {"x", "y", "split", "label"}
            if extra:
                raise InvalidInputError(f"{where}: unknown fields {sorted(extra)}")
            x, y = _token_list(rec, "x", where), _token_list(rec, "y", where)
            split = rec.get("split")
            if split not in SPLITS:
                raise InvalidInputError(f"{where}: split must be one of {SPLITS}, got {split!r}")
            if V is not None and max(x + y) >= V:
                raise InvalidInputError(f"{where}: token id {max(x + y)} >= vocabulary size {V}")
            if min(x + y) < 0:
                raise InvalidInputError(f"{where}: negative token id")
            label = rec.get("label")
            if label is not None and label not in (USEFUL, USELESS):
                raise InvalidInputError(f"{where}: label must be 'useful' or 'useless'")
            splits[split].append(TokenSample(x, y))
            if split == "sft":
                labels.append(label)
    if any(lab is None for lab in labels) and any(lab is not None for lab in labels):
        raise InvalidInputError(f"{path}: either every SFT record carries a label or none does")
    ds = Datasets(
        sft=tuple(splits["sft"]),
        val=tuple(splits["val"]),
        eval=tuple(splits["eval"]),
        labels=tuple(labels) if labels and labels[0] is not None else None,
    )
    log.info("loaded %s: %d sft, %d val, %d eval", path, len(ds.sft), len(ds.val), len(ds.eval))
    return ds.require(*require)


class MetricsWriter:
    """CSV sink that writes the header on open and flushes after every row."""

    def __init__(self, path, fields):
        self.fields = tuple(fields)
        self._fh = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.fields, lineterminator="\n")
        self._writer.writeheader()
        self._fh.flush()

    def __call__(self, row):
        d = row.as_dict() if hasattr(row, "as_dict") else dict(row)
        self._writer.writerow({k: _fmt(d.get(k, math.nan)) for k in self.fields})
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    # repr round-trips doubles exactly, so replays compare bit for bit
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in r.items()} for r in rows]


def write_weights(path, weights, step, append=False):
    """Weight snapshot rows ``step,index,logit,weight``."""
    new = not append or not Path(path).exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(("step", "index", "logit", "weight"))
        for i, (lg, wt) in enumerate(zip(weights.logits, weights.weights)):
            w.writerow((int(step), i, repr(float(lg)), repr(float(wt))))


def save_checkpoint(path, params, weights, step):
    doc = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "spec": params.spec.to_dict(),
        "params": params.values.tolist(),
        "omega": weights.logits.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    spec = BackboneSpec(**doc["spec"])
    return Params(np.array(doc["params"]), spec), WeightState.from_logits(doc["omega"]), doc["step"]


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def write_report(path, checks):
    """``checks`` maps a check name to ``{pass, value, tolerance}``; extra keys are kept."""
    doc = {name: {k: _json_value(v) for k, v in c.items()} for name, c in checks.items()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
