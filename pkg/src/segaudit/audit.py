"""Group-level bias discovery from per-case quality estimates.

A population is split into exactly two groups by a protected attribute and
the signed per-structure gap of mean estimated Dice (positive group minus
the other) is the bias measure. When true Dice scores are also supplied,
the same gap is computed from them and the report carries correlation and
calibration diagnostics so the estimate can be judged against reality.
"""

from dataclasses import dataclass, field as dataclass_field
from typing import Mapping, Sequence

import numpy as np

from .metrics import DiceScore
from .rca import RcaEstimate

__all__ = ["GroupStats", "AuditReport", "CaseResult", "audit", "sign_agreement"]


@dataclass(frozen=True)
class CaseResult:
    """One audited case: its estimate, attributes, and optional true score."""

    case_id: str
    estimate: RcaEstimate
    attributes: Mapping[str, str]
    true_dice: DiceScore | None = None

    def __post_init__(self):
        object.__setattr__(self, "attributes", dict(self.attributes))


@dataclass(frozen=True)
class GroupStats:
    group_value: str
    n_cases: int
    mean_dsc_rca: Mapping[str, float]
    mean_dsc_true: Mapping[str, float] | None
    case_ids: tuple[str, ...]

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("a group must contain at least one case")
        for v in self.mean_dsc_rca.values():
            if not (0.0 <= v <= 1.0):
                raise ValueError("group means must lie in [0, 1]")
        object.__setattr__(self, "mean_dsc_rca", dict(self.mean_dsc_rca))
        if self.mean_dsc_true is not None:
            object.__setattr__(self, "mean_dsc_true", dict(self.mean_dsc_true))


@dataclass(frozen=True)
class AuditReport:
    """Signed per-structure gaps between two demographic groups.

    ``delta_rca[s] = positive-group mean - negative-group mean`` of the
    estimated Dice for structure ``s``; ``delta_true`` is the same gap from
    ground truth when available. Diagnostics (``sign_agreement``,
    ``pearson_r``, fitted slope/intercept of estimated vs true gaps) are
    present only when at least two paired gap observations exist.
    """

    attribute: str
    positive: GroupStats
    negative: GroupStats
    delta_rca: Mapping[str, float]
    delta_true: Mapping[str, float] | None = None
    sign_agreement: float | None = None
    pearson_r: float | None = None
    fitted_slope: float | None = None
    fitted_intercept: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "delta_rca", dict(self.delta_rca))
        if self.delta_true is not None:
            object.__setattr__(self, "delta_true", dict(self.delta_true))
        if self.sign_agreement is not None and not (0.0 <= self.sign_agreement <= 1.0):
            raise ValueError("sign_agreement must lie in [0, 1]")

    @property
    def structures(self) -> tuple[str, ...]:
        return tuple(self.delta_rca)


def audit(
    cases: Sequence[CaseResult], attribute: str, positive_group: str
) -> AuditReport:
    """Compute signed group gaps of estimated (and optionally true) Dice.

    Every case must carry ``attribute`` and the population must have exactly
    two attribute values, one of them ``positive_group``. True Dice must be
    present either on every case or on none.
    """
    if not cases:
        raise ValueError("no cases to audit")
    for c in cases:
        if attribute not in c.attributes:
            raise ValueError(f"case {c.case_id!r} is missing attribute {attribute!r}")
    values = sorted({c.attributes[attribute] for c in cases})
    if len(values) != 2:
        raise ValueError(
            f"attribute {attribute!r} must take exactly two values, found {values}"
        )
    if positive_group not in values:
        raise ValueError(
            f"positive_group {positive_group!r} is not a value of {attribute!r} ({values})"
        )
    negative_group = values[0] if values[1] == positive_group else values[1]

    structures = tuple(cases[0].estimate.aggregate.per_structure)
    for c in cases:
        if tuple(c.estimate.aggregate.per_structure) != structures:
            raise ValueError(f"case {c.case_id!r} has a different structure list")

    with_true = [c for c in cases if c.true_dice is not None]
    if with_true and len(with_true) != len(cases):
        raise ValueError("true Dice must be present on all cases or on none")
    has_true = bool(with_true)

    def group_stats(value: str) -> GroupStats:
        members = [c for c in cases if c.attributes[attribute] == value]
        mean_rca = {
            s: float(np.mean([c.estimate.aggregate.per_structure[s] for c in members]))
            for s in structures
        }
        mean_true = None
        if has_true:
            mean_true = {
                s: float(np.mean([c.true_dice.per_structure[s] for c in members]))
                for s in structures
            }
        return GroupStats(
            group_value=value,
            n_cases=len(members),
            mean_dsc_rca=mean_rca,
            mean_dsc_true=mean_true,
            case_ids=tuple(c.case_id for c in members),
        )

    pos = group_stats(positive_group)
    neg = group_stats(negative_group)
    delta_rca = {
        s: pos.mean_dsc_rca[s] - neg.mean_dsc_rca[s] for s in structures
    }
    delta_true = None
    agreement = pearson = slope = intercept = None
    if has_true:
        delta_true = {
            s: pos.mean_dsc_true[s] - neg.mean_dsc_true[s] for s in structures
        }
        pairs = [(delta_true[s], delta_rca[s]) for s in structures]
        if len(pairs) >= 2:
            agreement, _ = sign_agreement(pairs, threshold=0.0)
            pearson = _pearson_or_none([p[0] for p in pairs], [p[1] for p in pairs])
            slope, intercept = _least_squares_or_none(
                [p[0] for p in pairs], [p[1] for p in pairs]
            )
    return AuditReport(
        attribute=attribute,
        positive=pos,
        negative=neg,
        delta_rca=delta_rca,
        delta_true=delta_true,
        sign_agreement=agreement,
        pearson_r=pearson,
        fitted_slope=slope,
        fitted_intercept=intercept,
    )


def sign_agreement(
    pairs: Sequence[tuple[float, float]], threshold: float = 0.0
) -> tuple[float, int]:
    """Fraction of (true gap, estimated gap) pairs whose signs agree.

    Pairs with ``|true gap| < threshold`` are excluded first (small true
    gaps are indistinguishable from noise); ``sign(0)`` matches only 0.
    Returns (fraction, number of retained pairs); raises if the threshold
    excludes everything.
    """
    if not pairs:
        raise ValueError("no pairs given")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    retained = [(t, e) for t, e in pairs if abs(t) >= threshold]
    if not retained:
        raise ValueError(
            f"threshold {threshold} excludes all {len(pairs)} pairs; nothing to compare"
        )
    matches = sum(1 for t, e in retained if np.sign(t) == np.sign(e))
    return matches / len(retained), len(retained)


def _pearson_or_none(x: Sequence[float], y: Sequence[float]) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xd = x - x.mean()
    yd = y - y.mean()
    denom = np.sqrt((xd * xd).sum() * (yd * yd).sum())
    if denom == 0.0:
        return None
    return float(np.clip((xd * yd).sum() / denom, -1.0, 1.0))


def _least_squares_or_none(
    x: Sequence[float], y: Sequence[float]
) -> tuple[float | None, float | None]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    var = float(((x - x.mean()) ** 2).sum())
    if var == 0.0:
        return None, None
    slope = float(((x - x.mean()) * (y - y.mean())).sum() / var)
    return slope, float(y.mean() - slope * x.mean())
