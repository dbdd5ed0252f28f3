"""Segmentation overlap metrics."""

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .core import LabelMask

__all__ = ["DiceScore", "dsc"]


@dataclass(frozen=True)
class DiceScore:
    """Per-structure Dice values plus their arithmetic mean."""

    per_structure: Mapping[str, float]
    macro_average: float

    def __post_init__(self):
        values = dict(self.per_structure)
        if not values:
            raise ValueError("at least one structure is required")
        for name, v in values.items():
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"dice for {name!r} out of [0, 1]: {v}")
        mean = float(np.mean(list(values.values())))
        if abs(mean - self.macro_average) > 1e-12:
            raise ValueError("macro_average must be the mean of per-structure values")
        object.__setattr__(self, "per_structure", MappingProxyType(values))

    @classmethod
    def from_per_structure(cls, values: Mapping[str, float]) -> "DiceScore":
        values = dict(values)
        macro = float(np.mean(list(values.values()))) if values else 0.0
        return cls(values, macro)

    def __getitem__(self, structure: str) -> float:
        return self.per_structure[structure]


def dsc(pred: LabelMask, gt: LabelMask) -> DiceScore:
    """Dice-Sorensen overlap 2|P∩G| / (|P|+|G|) per structure.

    Both masks empty for a structure counts as a perfect 1.0 (a correctly
    predicted absent structure); exactly one empty scores 0.0.
    """
    if pred.structures != gt.structures:
        raise ValueError(
            f"structure lists differ: {pred.structures} vs {gt.structures}"
        )
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    values = {}
    for name, p, g in zip(pred.structures, pred.channels, gt.channels):
        total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
        if total == 0:
            values[name] = 1.0
        else:
            values[name] = 2.0 * np.count_nonzero(p & g) / total
    return DiceScore.from_per_structure(values)
