"""Rank reference images by similarity to an atlas image and pick the top-k.

Scoring runs on small box-filtered thumbnails, so the selection is cheap
even for large reference databases. The default metric is normalized
cross-correlation, which is invariant to global affine intensity changes;
negated SSD is available as an alternative.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .core import Image, box_resize

if TYPE_CHECKING:
    from .rca import ReferenceDatabase

__all__ = ["SimilarityRanking", "ncc", "top_k_select"]

_METRICS = ("ncc", "ssd")


@dataclass(frozen=True)
class SimilarityRanking:
    """(reference id, score) pairs sorted by descending score, ties by id."""

    entries: tuple[tuple[str, float], ...]
    metric_name: str

    def __post_init__(self):
        ids = [rid for rid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("reference ids must be unique")
        key = [(-score, rid) for rid, score in self.entries]
        if key != sorted(key):
            raise ValueError("entries must be sorted by descending score, ties by id")
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(rid for rid, _ in self.entries)


def ncc(a: Image, b: Image) -> float:
    """Pearson correlation of the two intensity vectors, in [-1, 1].

    Returns 0.0 when either image has zero variance.
    """
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return _pearson(a.pixels.ravel(), b.pixels.ravel())


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xd = x - x.mean()
    yd = y - y.mean()
    denom = np.sqrt((xd * xd).sum() * (yd * yd).sum())
    if denom == 0.0:
        return 0.0
    return float(np.clip((xd * yd).sum() / denom, -1.0, 1.0))


def top_k_select(
    atlas: Image,
    db: "ReferenceDatabase",
    k: int,
    thumb_size: int = 32,
    metric: str = "ncc",
) -> SimilarityRanking:
    """Score every reference against the atlas and keep the best min(k, n).

    All images are box-downsampled to ``thumb_size`` squared before scoring.
    Deterministic: ties are broken by ascending reference id.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not db.records:
        raise ValueError("reference database is empty")
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {_METRICS}")
    atlas_thumb = box_resize(atlas.pixels, thumb_size, thumb_size)
    scored = []
    for rec in db.records:
        thumb = box_resize(rec.image.pixels, thumb_size, thumb_size)
        if metric == "ncc":
            score = _pearson(atlas_thumb.ravel(), thumb.ravel())
        else:
            score = -float(np.mean((atlas_thumb - thumb) ** 2))
        scored.append((rec.id, score))
    scored.sort(key=lambda e: (-e[1], e[0]))
    return SimilarityRanking(tuple(scored[: min(k, len(scored))]), metric)
