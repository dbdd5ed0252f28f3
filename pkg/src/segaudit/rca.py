"""Estimate segmentation quality without ground truth.

The idea: treat the prediction under evaluation as pseudo ground truth,
register its image (the atlas) onto reference images whose true masks are
known, carry the prediction along each recovered deformation, and score
the transferred masks against the reference masks. A good prediction
transfers into good overlap on the references; a bad one cannot. The
per-reference Dice values are aggregated (mean by default, max available
for comparison) into one quality estimate per structure.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from typing import Mapping

import numpy as np

from .core import DisplacementField, Image, LabelMask, warp_mask
from .metrics import DiceScore, dsc
from .registration import RegistrationConfig, RegistrationError, register
from .similarity import top_k_select

__all__ = [
    "ReferenceRecord",
    "ReferenceDatabase",
    "RcaEstimate",
    "PropagationPlan",
    "AllRegistrationsFailedError",
    "plan_propagation",
    "score_propagation",
    "estimate_dsc_rca",
]

logger = logging.getLogger(__name__)

AGGREGATORS = ("mean", "max")


class AllRegistrationsFailedError(RuntimeError):
    """Every selected reference failed to register; no estimate is possible."""


@dataclass(frozen=True, eq=False)
class ReferenceRecord:
    """One reference case: image, trusted mask, and demographic attributes."""

    id: str
    image: Image
    mask: LabelMask
    attributes: Mapping[str, str] = dataclass_field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("reference id must be non-empty")
        if self.image.shape != self.mask.shape:
            raise ValueError(f"reference {self.id!r}: image and mask shapes differ")
        object.__setattr__(self, "attributes", dict(self.attributes))


@dataclass(frozen=True, eq=False)
class ReferenceDatabase:
    """Immutable collection of reference records sharing one structure list."""

    records: tuple[ReferenceRecord, ...]

    def __post_init__(self):
        records = tuple(self.records)
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("reference ids must be unique")
        if records:
            structures = records[0].mask.structures
            for r in records[1:]:
                if r.mask.structures != structures:
                    raise ValueError(
                        f"reference {r.id!r} has structures {r.mask.structures}, "
                        f"expected {structures}"
                    )
        object.__setattr__(self, "records", records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def structures(self) -> tuple[str, ...]:
        if not self.records:
            raise ValueError("reference database is empty")
        return self.records[0].mask.structures

    def get(self, ref_id: str) -> ReferenceRecord:
        for r in self.records:
            if r.id == ref_id:
                return r
        raise KeyError(ref_id)

    def without(self, case_id: str) -> "ReferenceDatabase":
        """Copy of the database with the named case removed, if present."""
        return ReferenceDatabase(tuple(r for r in self.records if r.id != case_id))


@dataclass(frozen=True, eq=False)
class RcaEstimate:
    """Registration-based quality estimate for one predicted segmentation."""

    case_id: str
    per_reference: tuple[tuple[str, DiceScore], ...]
    aggregate: DiceScore
    aggregator: str
    k_used: int
    skipped: tuple[str, ...] = ()

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.k_used != len(self.per_reference):
            raise ValueError("k_used must equal the number of per-reference scores")
        if self.aggregator == "mean" and self.per_reference:
            for s, agg_value in self.aggregate.per_structure.items():
                mean_value = float(
                    np.mean([d.per_structure[s] for _, d in self.per_reference])
                )
                if abs(mean_value - agg_value) > 1e-12:
                    raise ValueError(
                        f"mean aggregate for {s!r} inconsistent with per-reference scores"
                    )


@dataclass(frozen=True, eq=False)
class PropagationPlan:
    """Precomputed registrations from one atlas to its selected references.

    Registration depends only on the images, not on the prediction, so one
    plan can score any number of candidate masks for the same atlas.
    Entries are sorted by reference id, which makes downstream aggregation
    independent of completion order.
    """

    case_id: str
    entries: tuple[tuple[ReferenceRecord, DisplacementField], ...]
    skipped: tuple[str, ...]
    k_requested: int


def plan_propagation(
    atlas: Image,
    db: ReferenceDatabase,
    k: int,
    cfg: RegistrationConfig | None = None,
    case_id: str = "",
    workers: int = 1,
    thumb_size: int = 32,
) -> PropagationPlan:
    """Select the top-k most similar references and register the atlas to each.

    A record whose id equals ``case_id`` is excluded so a case never scores
    against itself. References whose registration fails are skipped with a
    warning; if every one fails, :class:`AllRegistrationsFailedError` is
    raised.
    """
    cfg = cfg or RegistrationConfig()
    candidates = db.without(case_id) if case_id else db
    if not candidates.records:
        raise ValueError("reference database is empty (after excluding the atlas case)")
    ranking = top_k_select(atlas, candidates, k, thumb_size=thumb_size)
    selected = [candidates.get(rid) for rid in ranking.ids]

    def run_one(rec: ReferenceRecord):
        return rec.id, register(atlas, rec.image, cfg).field

    results: dict[str, DisplacementField] = {}
    skipped: list[str] = []
    if workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {rec.id: pool.submit(run_one, rec) for rec in selected}
        for rid, fut in futures.items():
            try:
                results[rid] = fut.result()[1]
            except RegistrationError as exc:
                logger.warning("skipping reference %s for case %s: %s", rid, case_id, exc)
                skipped.append(rid)
    else:
        for rec in selected:
            try:
                results[rec.id] = run_one(rec)[1]
            except RegistrationError as exc:
                logger.warning(
                    "skipping reference %s for case %s: %s", rec.id, case_id, exc
                )
                skipped.append(rec.id)
    if not results:
        raise AllRegistrationsFailedError(
            f"all {len(selected)} selected references failed to register"
            f" for case {case_id!r}"
        )
    entries = tuple(
        (candidates.get(rid), results[rid]) for rid in sorted(results)
    )
    return PropagationPlan(
        case_id=case_id,
        entries=entries,
        skipped=tuple(sorted(skipped)),
        k_requested=k,
    )


def score_propagation(
    plan: PropagationPlan, pred: LabelMask, aggregator: str = "mean"
) -> RcaEstimate:
    """Carry a prediction along each planned deformation and score the overlap."""
    if aggregator not in AGGREGATORS:
        raise ValueError(f"aggregator must be one of {AGGREGATORS}")
    per_reference = []
    for rec, field in plan.entries:
        warped = warp_mask(pred, field)
        per_reference.append((rec.id, dsc(warped, rec.mask)))
    structures = plan.entries[0][0].mask.structures
    values = {}
    for s in structures:
        scores = [d.per_structure[s] for _, d in per_reference]
        values[s] = float(np.mean(scores)) if aggregator == "mean" else float(max(scores))
    return RcaEstimate(
        case_id=plan.case_id,
        per_reference=tuple(per_reference),
        aggregate=DiceScore.from_per_structure(values),
        aggregator=aggregator,
        k_used=len(per_reference),
        skipped=plan.skipped,
    )


def estimate_dsc_rca(
    atlas: Image,
    pred: LabelMask,
    db: ReferenceDatabase,
    k: int,
    cfg: RegistrationConfig | None = None,
    aggregator: str = "mean",
    case_id: str = "",
    workers: int = 1,
    thumb_size: int = 32,
) -> RcaEstimate:
    """Estimate the Dice quality of ``pred`` for ``atlas`` without its ground truth.

    Pipeline: pick the top-k references most similar to the atlas, register
    the atlas onto each, warp the prediction through the recovered fields,
    score the warped masks against the reference ground truth, and aggregate
    per structure. Deterministic for fixed inputs, config, and seedless
    solvers; the worker count never changes results.
    """
    if pred.shape != atlas.shape:
        raise ValueError(f"prediction shape {pred.shape} != atlas shape {atlas.shape}")
    plan = plan_propagation(
        atlas, db, k, cfg, case_id=case_id, workers=workers, thumb_size=thumb_size
    )
    return score_propagation(plan, pred, aggregator)
