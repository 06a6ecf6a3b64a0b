"""Experiment configuration: a nested YAML/JSON document with strict keys.

Every section maps onto a dataclass whose defaults are the documented
defaults.  Unknown keys and type mismatches are rejected with the dotted
key in the error.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import InvalidConfigError
from .offline import TrainConfig
from .online import OnlineConfig

__all__ = [
    "MODES",
    "TRAIN_MODES",
    "InstanceSection",
    "GenerationSection",
    "OnlineSection",
    "BmoSection",
    "VerifySection",
    "ExperimentConfig",
    "parse_config",
    "apply_overrides",
    "dump_config",
]

MODES = ("offline-bds", "offline-mixing", "online-static", "online-dynamic", "bmo-stochastic", "verify")
TRAIN_MODES = MODES[:-1]


@dataclass(frozen=True)
class InstanceSection:
    """Synthetic instance to generate, or a JSONL dataset to load via ``path``."""

    V: int = 8
    L_x: int = 2
    D: int = 3
    n_sft: int = 40
    n_val: int = 12
    useless_fraction: float = 0.3
    backbone: str = "tabular"
    n_eval: int | None = None
    offset: int | None = None
    hidden: int = 8
    window: int = 2
    seed: int | None = None
    path: str | None = None


@dataclass(frozen=True)
class GenerationSection:
    temperature: float = 0.8
    max_tokens: int | None = None


@dataclass(frozen=True)
class OnlineSection:
    R: float = 0.1
    G: int = 1
    K_gen: int = 50
    clip: float | None = None
    split_normalization: bool = False


@dataclass(frozen=True)
class BmoSection:
    alpha_track: float = 1.0


@dataclass(frozen=True)
class VerifySection:
    rho_mix: list = field(default_factory=lambda: [0.5, 1.0])
    min_margin: float = 0.2
    eps_w: float | None = None
    bmo_tolerance: float = 0.05
    front_coverage: float = 0.95
    update_states: int = 20


SECTIONS = {
    "train": TrainConfig,
    "instance": InstanceSection,
    "generation": GenerationSection,
    "online": OnlineSection,
    "bmo": BmoSection,
    "verify": VerifySection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "offline-bds"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    instance: InstanceSection = field(default_factory=InstanceSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    online: OnlineSection = field(default_factory=OnlineSection)
    bmo: BmoSection = field(default_factory=BmoSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def online_config(self):
        strategy = "dynamic-mask" if self.mode == "online-dynamic" else "static-mask"
        o = self.online
        return OnlineConfig(R=o.R, G=o.G, K_gen=o.K_gen, temperature=self.generation.temperature,
                            strategy=strategy, clip=o.clip, split_normalization=o.split_normalization)

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _allowed(hint):
    """Python types accepted for an annotation, plus whether None is allowed."""
    args = typing.get_args(hint)
    if args:
        nullable = type(None) in args
        base = [a for a in args if a is not type(None)]
        return tuple(typing.get_origin(b) or b for b in base), nullable
    return (typing.get_origin(hint) or hint,), False


def _coerce(key, value, hint):
    types, nullable = _allowed(hint)
    if value is None:
        if nullable:
            return None
        raise InvalidConfigError(f"{key} may not be null", key=key)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) and bool not in types:
        raise InvalidConfigError(f"{key} expects {types[0].__name__}, got a boolean", key=key)
    if not isinstance(value, types):
        raise InvalidConfigError(f"{key} expects {types[0].__name__}, got {type(value).__name__}", key=key)
    return value


def _build(cls, doc, prefix):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise InvalidConfigError(f"{prefix or 'config'} must be a mapping", key=prefix or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        key = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise InvalidConfigError(f"unknown key {key!r}", key=key)
    kwargs = {}
    for name, value in doc.items():
        key = f"{prefix}.{name}" if prefix else name
        if prefix == "" and name in SECTIONS:
            kwargs[name] = _build(SECTIONS[name], value, name)
        else:
            kwargs[name] = _coerce(key, value, hints[name])
    try:
        return cls(**kwargs)
    except InvalidConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(f"{prefix or 'config'}: {exc}", key=prefix or None) from exc


def _validate(cfg):
    if cfg.mode not in MODES:
        raise InvalidConfigError(f"unknown mode {cfg.mode!r}; expected one of {', '.join(MODES)}", key="mode")
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg.seeds):
        raise InvalidConfigError("seeds must be a nonempty list of nonnegative integers", key="seeds")
    if cfg.instance.backbone not in ("tabular", "linear", "attention-lite"):
        raise InvalidConfigError(f"unknown backbone {cfg.instance.backbone!r}", key="instance.backbone")
    if not 0 <= cfg.instance.useless_fraction < 1:
        raise InvalidConfigError("useless_fraction must lie in [0, 1)", key="instance.useless_fraction")
    if not all(isinstance(r, (int, float)) and 0 < r <= 1 for r in cfg.verify.rho_mix):
        raise InvalidConfigError("verify.rho_mix entries must lie in (0, 1]", key="verify.rho_mix")
    if not cfg.generation.temperature >= 0:
        raise InvalidConfigError("temperature must be >= 0", key="generation.temperature")
    cfg.online_config()  # surfaces the online.* constraint checks
    return cfg


def _load_text(source):
    if isinstance(source, dict):
        return source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and os.path.isfile(source)):
        source = Path(source).read_text()
    try:
        doc = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"config is not well-formed YAML/JSON: {exc}") from exc
    return {} if doc is None else doc


def apply_overrides(doc, overrides):
    """Apply ``a.b=value`` strings onto a nested dict; values parse as YAML scalars."""
    doc = dict(doc)
    for item in overrides or ():
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            child = node.get(p)
            child = dict(child) if isinstance(child, dict) else {}
            node[p] = child
            node = child
        node[parts[-1]] = _scalar(raw)
    return doc


def _scalar(raw):
    if not raw.strip():
        return None
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e9" as a string; the command line should not care
        try:
            return float(value)
        except ValueError:
            pass
    return value


def parse_config(source=None, overrides=None, echo_dir=None):
    """Parse a path, YAML/JSON text or dict into a validated ExperimentConfig.

    ``overrides`` (``key=value`` strings) win over the document.  With
    ``echo_dir`` the effective config is written there as
    ``effective_config.yaml``.
    """
    doc = _load_text("" if source is None else source)
    if not isinstance(doc, dict):
        raise InvalidConfigError("config document must be a mapping")
    doc = apply_overrides(doc, overrides)
    cfg = _validate(_build(ExperimentConfig, doc, ""))
    if echo_dir is not None:
        Path(echo_dir).mkdir(parents=True, exist_ok=True)
        (Path(echo_dir) / "effective_config.yaml").write_text(dump_config(cfg))
    return cfg


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
