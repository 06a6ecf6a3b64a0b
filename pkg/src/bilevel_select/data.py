"""Dataset container shared by the trainers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .sft import TokenSample

USEFUL = "useful"
USELESS = "useless"
SPLITS = ("sft", "val", "eval")


@dataclass(frozen=True)
class Datasets:
    """SFT, validation and evaluation splits.

    ``labels`` optionally holds a ground-truth ``useful``/``useless`` tag per
    SFT sample.  ``reference`` maps a question tuple to the response the
    clean rule would give; it is used for generation-match metrics.
    """

    sft: tuple
    val: tuple
    eval: tuple = ()
    labels: tuple | None = None
    reference: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in SPLITS:
            samples = tuple(getattr(self, name))
            if not all(isinstance(s, TokenSample) for s in samples):
                raise InvalidInputError(f"split {name!r} must contain TokenSample objects")
            object.__setattr__(self, name, samples)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != len(self.sft):
                raise InvalidInputError("labels must have one entry per SFT sample")
            bad = set(labels) - {USEFUL, USELESS}
            if bad:
                raise InvalidInputError(f"unknown labels {sorted(bad)}")
            object.__setattr__(self, "labels", labels)
        if not self.reference:
            # fall back to the validation responses as the reference answers
            ref = {s.x: s.y for s in self.val + self.eval}
            object.__setattr__(self, "reference", ref)

    @property
    def N(self):
        return len(self.sft)

    def useless_mask(self):
        if self.labels is None:
            return None
        return np.array([lab == USELESS for lab in self.labels])

    def check_vocab(self, V):
        for name in SPLITS:
            for s in getattr(self, name):
                s.check_vocab(V)
        return self

    def require(self, *splits):
        for name in splits:
            if not getattr(self, name):
                raise InvalidInputError(f"split {name!r} is empty but required")
        return self
