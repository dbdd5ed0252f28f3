"""Synthetic chest-like phantoms and the graded-quality grid experiment.

Phantoms are procedurally generated images with known lung/heart masks and
a binary sex attribute; the two sexes differ deterministically in thorax
shape so groups are distinguishable yet registrable. A twelve-step mask
degradation schedule fabricates segmenters of graded quality (level 1 is
the worst, level 12 leaves the mask untouched), mimicking a model that
improves over training. The grid runner pairs a per-sex degradation level
for every (i, j) combination and compares true group gaps against
registration-estimated ones.
"""

import warnings as _warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    DisplacementField,
    Image,
    LabelMask,
    gaussian_smooth,
    sample_bilinear,
)
from .metrics import dsc
from .rca import ReferenceDatabase, ReferenceRecord, plan_propagation, score_propagation
from .registration import RegistrationConfig

__all__ = [
    "ShapeParams",
    "PhantomSpec",
    "PhantomCase",
    "DegradationLevel",
    "GridResult",
    "make_spec",
    "generate_phantom",
    "degrade",
    "degradation_schedule",
    "build_corpus",
    "build_reference_db",
    "run_grid",
    "case_degradation_seed",
    "within_group_indices",
]

STRUCTURES = ("lung", "heart")
SEXES = ("M", "F")

# Degradation schedule endpoints (pixels / probability at the worst level).
_EROSION_MAX = 4.0
_JITTER_MAX = 5.0
_JITTER_MIN = 1.5
_DROP_MAX = 0.06
_JITTER_FIELD_SIGMA = 4.0

# Sub-stream tags for deterministic seeding.
_TAG_CORPUS = 0
_TAG_REFERENCE = 1
_TAG_DEGRADE = 2
_TAG_SHAPE = 3
_TAG_TEXTURE = 4


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def case_degradation_seed(master_seed: int, within_group_index: int) -> int:
    """Seed for corrupting one corpus case's mask.

    Keyed by the case's index *within its sex group*, so the m-th male and
    m-th female case share their corruption draws (same jitter field shape,
    same erasure uniforms). A fabricated segmenter's error pattern is a
    property of the segmenter, not of who it segments; sharing draws across
    the groups makes equal-severity cells differ only through anatomy and
    keeps group-gap noise low. Shared by the in-process grid runner and the
    manifest exporter so a grid cell reproduces bit-exactly through either
    path.
    """
    return _derive_seed(master_seed, _TAG_DEGRADE, within_group_index)


def within_group_indices(sexes: Sequence[str]) -> list[int]:
    """Position of each case inside its own sex group."""
    counts: dict[str, int] = {}
    out = []
    for sex in sexes:
        out.append(counts.get(sex, 0))
        counts[sex] = out[-1] + 1
    return out


@dataclass(frozen=True)
class ShapeParams:
    """Phantom geometry in fractions of the image size.

    ``lung_offset`` is the horizontal distance of each lung center from the
    body axis; all ellipse axes are semi-axes.
    """

    body_axes: tuple[float, float] = (0.40, 0.41)
    lung_offset: float = 0.195
    lung_center_y: float = 0.48
    lung_axes: tuple[float, float] = (0.135, 0.245)
    heart_center: tuple[float, float] = (0.545, 0.625)
    heart_axes: tuple[float, float] = (0.145, 0.16)

    def __post_init__(self):
        for pair in (self.body_axes, self.lung_axes, self.heart_axes):
            if min(pair) <= 0:
                raise ValueError("ellipse axes must be positive")
        if self.lung_offset <= 0:
            raise ValueError("lung offset must be positive")

    @classmethod
    def for_sex(cls, sex: str) -> "ShapeParams":
        """Deterministic per-sex baseline: broader thorax for M, higher lung
        apex and a more medial heart for F.

        The sexes differ only in structure *positions*, never in ellipse
        axes: mask corruption is translation-invariant, so equal degradation
        severity costs both groups the same Dice in distribution and group
        gaps reflect the segmenter pairing, not the anatomy.
        """
        if sex == "M":
            return cls()
        if sex == "F":
            return cls(
                body_axes=(0.375, 0.40),
                lung_offset=0.170,
                lung_center_y=0.452,
                lung_axes=(0.135, 0.245),
                heart_center=(0.53, 0.605),
                heart_axes=(0.145, 0.16),
            )
        raise ValueError(f"sex must be one of {SEXES}, got {sex!r}")

    def jittered(self, rng: np.random.Generator, amount: float = 1.0) -> "ShapeParams":
        """Per-case anatomical variation: axes scaled, centers shifted."""

        def scale(v: float) -> float:
            return v * (1.0 + 0.06 * amount * rng.uniform(-1, 1))

        def shift(v: float) -> float:
            return v + 0.012 * amount * rng.uniform(-1, 1)

        return ShapeParams(
            body_axes=(scale(self.body_axes[0]), scale(self.body_axes[1])),
            lung_offset=scale(self.lung_offset),
            lung_center_y=shift(self.lung_center_y),
            lung_axes=(scale(self.lung_axes[0]), scale(self.lung_axes[1])),
            heart_center=(shift(self.heart_center[0]), shift(self.heart_center[1])),
            heart_axes=(scale(self.heart_axes[0]), scale(self.heart_axes[1])),
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to reproduce one phantom bit-exactly."""

    seed: int
    size: int = 64
    sex: str = "M"
    shape_params: ShapeParams = dataclass_field(default_factory=ShapeParams)
    noise_level: float = 0.01

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("phantom size must be at least 16 pixels")
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")


def make_spec(
    seed: int,
    size: int = 64,
    sex: str = "M",
    noise_level: float = 0.01,
    variability: float = 1.0,
) -> PhantomSpec:
    """Spec with the sex baseline plus seeded per-case anatomical jitter."""
    params = ShapeParams.for_sex(sex).jittered(_rng(seed, _TAG_SHAPE), variability)
    return PhantomSpec(
        seed=seed, size=size, sex=sex, shape_params=params, noise_level=noise_level
    )


def generate_phantom(spec: PhantomSpec) -> tuple[Image, LabelMask]:
    """Render a phantom image and its ground-truth lung/heart mask.

    The image is a smooth background with a soft-tissue body ellipse, two
    dark lung fields, a bright heart, a low-frequency texture layer (gives
    intensity-based registration traction away from edges), and Gaussian
    noise. Bit-reproducible for a fixed spec.
    """
    size = spec.size
    p = spec.shape_params
    iy, ix = np.indices((size, size))

    def ellipse(cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
        if not (ax * size >= 1 and ay * size >= 1):
            raise ValueError("ellipse too small for the grid")
        if (
            cx - ax < 1.0 / size
            or cx + ax > 1.0 - 1.0 / size
            or cy - ay < 1.0 / size
            or cy + ay > 1.0 - 1.0 / size
        ):
            raise ValueError("phantom shape out of image bounds")
        return ((ix - cx * size) / (ax * size)) ** 2 + (
            (iy - cy * size) / (ay * size)
        ) ** 2 <= 1.0

    img = 0.30 + 0.10 * (iy / size)
    body = ellipse(0.5, 0.52, p.body_axes[0], p.body_axes[1])
    img[body] = 0.62
    lung_left = ellipse(0.5 - p.lung_offset, p.lung_center_y, *p.lung_axes)
    lung_right = ellipse(0.5 + p.lung_offset, p.lung_center_y, *p.lung_axes)
    heart = ellipse(*p.heart_center, *p.heart_axes)
    img[lung_left | lung_right] = 0.22
    img[heart] = 0.78

    texture_rng = _rng(spec.seed, _TAG_TEXTURE)
    texture = gaussian_smooth(texture_rng.uniform(-1, 1, (size, size)), 3.0)
    peak = np.abs(texture).max()
    if peak > 0:
        img = img + 0.04 * texture / peak
    img = gaussian_smooth(np.clip(img, 0.0, 1.0), 1.0)
    if spec.noise_level > 0:
        img = img + spec.noise_level * texture_rng.standard_normal((size, size))
    mask = LabelMask(STRUCTURES, np.stack([lung_left | lung_right, heart]))
    return Image(np.clip(img, 0.0, 1.0)), mask


@dataclass(frozen=True)
class DegradationLevel:
    """Mask corruption severity; level 1 is worst, level 12 is a no-op."""

    level: int
    erosion_radius: float
    jitter_amplitude: float
    drop_probability: float

    def __post_init__(self):
        if not 1 <= self.level <= 12:
            raise ValueError("level must be in 1..12")
        if min(self.erosion_radius, self.jitter_amplitude, self.drop_probability) < 0:
            raise ValueError("degradation parameters must be non-negative")
        if self.drop_probability > 1:
            raise ValueError("drop_probability must be at most 1")
        if self.level == 12 and (
            self.erosion_radius or self.jitter_amplitude or self.drop_probability
        ):
            raise ValueError("level 12 must apply no degradation")

    @classmethod
    def for_level(cls, level: int) -> "DegradationLevel":
        if level == 12:
            return cls(12, 0.0, 0.0, 0.0)
        severity = (12 - level) / 11.0
        jitter = _JITTER_MIN + (_JITTER_MAX - _JITTER_MIN) * (11 - level) / 10.0
        return cls(
            level=level,
            erosion_radius=_EROSION_MAX * severity,
            jitter_amplitude=jitter,
            drop_probability=_DROP_MAX * severity,
        )


def degradation_schedule() -> tuple[DegradationLevel, ...]:
    """The twelve default levels, worst (1) to pristine (12)."""
    return tuple(DegradationLevel.for_level(level) for level in range(1, 13))


def degrade(gt: LabelMask, level: DegradationLevel, seed: int) -> LabelMask:
    """Corrupt a mask with severity set by ``level``: Euclidean erosion,
    a smooth boundary-jitter warp, then per-structure erasure.

    Deterministic given (mask, level, seed). The random draws (jitter field
    shape, erasure uniforms) depend on the seed only, while the level sets
    their strength, so corruptions are nested across levels: a structure
    erased at level 7 is also erased at every worse level, and the boundary
    undulates the same way with growing amplitude. That makes per-case
    quality decay cleanly as levels worsen, the way one training run's
    checkpoints do. Level 12 returns the input unchanged.
    """
    if level.level == 12:
        return gt
    rng = _rng(seed, _TAG_DEGRADE)
    h, w = gt.shape
    jitter_dx = gaussian_smooth(rng.uniform(-1, 1, (h, w)), _JITTER_FIELD_SIGMA)
    jitter_dy = gaussian_smooth(rng.uniform(-1, 1, (h, w)), _JITTER_FIELD_SIGMA)
    drop_uniforms = rng.random(len(gt.structures))

    jitter_field = None
    if level.jitter_amplitude > 0:
        peak = np.hypot(jitter_dx, jitter_dy).max()
        if peak > 0:
            scale = level.jitter_amplitude / peak
            jitter_field = DisplacementField(jitter_dx * scale, jitter_dy * scale)

    # Erosion and jitter act jointly on each channel's signed distance:
    # keep a pixel when the (jitter-displaced) signed distance exceeds the
    # erosion radius. Off-lattice sampling makes the corrupted area vary
    # smoothly with both knobs, with no nearest-neighbor dead zone.
    channels = []
    for ch in gt.channels:
        if not ch.any() or (level.erosion_radius == 0 and jitter_field is None):
            channels.append(ch)
            continue
        signed_dist = ndimage.distance_transform_edt(ch) - ndimage.distance_transform_edt(~ch)
        if jitter_field is not None:
            signed_dist = sample_bilinear(signed_dist, jitter_field)
        channels.append(signed_dist > level.erosion_radius)
    mask = LabelMask(gt.structures, np.stack(channels))
    if level.drop_probability > 0:
        channels = np.array(mask.channels)
        dropped = drop_uniforms < level.drop_probability
        if dropped.any():
            channels[dropped] = False
        mask = LabelMask(mask.structures, channels)
    return mask


@dataclass(frozen=True, eq=False)
class PhantomCase:
    """One test-population member: image, ground truth, and attributes."""

    case_id: str
    image: Image
    mask: LabelMask
    attributes: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "attributes", dict(self.attributes))


def build_corpus(
    n_cases: int,
    size: int = 64,
    seed: int = 0,
    noise_level: float = 0.01,
    id_prefix: str = "case",
) -> tuple[PhantomCase, ...]:
    """Sex-balanced phantom test population (alternating M/F)."""
    if n_cases < 1:
        raise ValueError("n_cases must be at least 1")
    cases = []
    for idx in range(n_cases):
        sex = SEXES[idx % 2]
        spec = make_spec(
            _derive_seed(seed, _TAG_CORPUS, idx), size=size, sex=sex,
            noise_level=noise_level,
        )
        image, mask = generate_phantom(spec)
        cases.append(
            PhantomCase(f"{id_prefix}_{idx:03d}", image, mask, {"sex": sex})
        )
    return tuple(cases)


def build_reference_db(
    n_references: int,
    size: int = 64,
    seed: int = 0,
    noise_level: float = 0.01,
    id_prefix: str = "ref",
) -> ReferenceDatabase:
    """Held-out phantoms with uncorrupted masks, disjoint from any corpus
    built with the same seed."""
    if n_references < 1:
        raise ValueError("n_references must be at least 1")
    records = []
    for idx in range(n_references):
        sex = SEXES[idx % 2]
        spec = make_spec(
            _derive_seed(seed, _TAG_REFERENCE, idx), size=size, sex=sex,
            noise_level=noise_level,
        )
        image, mask = generate_phantom(spec)
        records.append(
            ReferenceRecord(f"{id_prefix}_{idx:03d}", image, mask, {"sex": sex})
        )
    return ReferenceDatabase(tuple(records))


@dataclass(frozen=True, eq=False)
class GridResult:
    """Outcome of the per-sex degradation grid.

    ``delta_true[s][i, j]`` is the true male-minus-female Dice gap for
    structure ``s`` when male cases are segmented at level i+1 and female
    cases at level j+1; ``delta_rca[agg][s]`` is the matching estimated gap
    under aggregator ``agg``. Per-case tables keep the underlying
    (case, level) scores used to assemble the matrices.
    """

    structures: tuple[str, ...]
    level_numbers: tuple[int, ...]
    case_ids: tuple[str, ...]
    sexes: tuple[str, ...]
    true_by_case: Mapping[str, np.ndarray]
    rca_by_case: Mapping[str, Mapping[str, np.ndarray]]
    delta_true: Mapping[str, np.ndarray]
    delta_rca: Mapping[str, Mapping[str, np.ndarray]]
    warnings: tuple[str, ...] = ()

    @property
    def aggregators(self) -> tuple[str, ...]:
        return tuple(self.delta_rca)

    def gap_pairs(
        self, structure: str, aggregator: str = "mean"
    ) -> tuple[np.ndarray, np.ndarray]:
        """Paired (true gap, estimated gap) values over all grid cells."""
        return (
            self.delta_true[structure].ravel().copy(),
            self.delta_rca[aggregator][structure].ravel().copy(),
        )


def run_grid(
    corpus: Sequence[PhantomCase],
    reference_db: ReferenceDatabase,
    k: int = 5,
    cfg: RegistrationConfig | None = None,
    levels: Sequence[DegradationLevel] | None = None,
    seed: int = 0,
    workers: int = 1,
    aggregators: Sequence[str] = ("mean", "max"),
    thumb_size: int = 32,
) -> GridResult:
    """Evaluate every (male level, female level) pairing of fabricated
    segmenters over the corpus.

    Each corpus case is registered once to its top-k references; every
    degradation level of its mask is then scored through those shared
    deformations (a fabricated segmenter's output on a case does not depend
    on which segmenter handles the other sex, so cell (i, j) reuses the
    per-case level scores). Results are bit-reproducible for a fixed seed
    and independent of ``workers``.
    """
    cfg = cfg or RegistrationConfig()
    levels = tuple(levels) if levels is not None else degradation_schedule()
    corpus = tuple(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    structures = corpus[0].mask.structures
    notes = []
    sexes = tuple(c.attributes.get("sex", "") for c in corpus)
    n_male = sum(1 for s in sexes if s == "M")
    n_female = sum(1 for s in sexes if s == "F")
    if n_male == 0 or n_female == 0:
        raise ValueError("corpus must contain both sexes")
    if n_male != n_female:
        notes.append(f"corpus is not sex-balanced: {n_male} male vs {n_female} female")
        _warnings.warn(notes[-1], stacklevel=2)
    overlap = {c.case_id for c in corpus} & {r.id for r in reference_db.records}
    if overlap:
        notes.append(f"corpus overlaps reference db on ids: {sorted(overlap)}")
        _warnings.warn(notes[-1], stacklevel=2)

    n_cases, n_levels = len(corpus), len(levels)
    true_by_case = {s: np.zeros((n_cases, n_levels)) for s in structures}
    rca_by_case = {
        agg: {s: np.zeros((n_cases, n_levels)) for s in structures}
        for agg in aggregators
    }
    group_indices = within_group_indices(sexes)

    def run_case(ci: int):
        case = corpus[ci]
        plan = plan_propagation(
            case.image, reference_db, k, cfg, case_id=case.case_id,
            thumb_size=thumb_size,
        )
        out = []
        for level in levels:
            pred = degrade(
                case.mask, level, case_degradation_seed(seed, group_indices[ci])
            )
            true_score = dsc(pred, case.mask)
            estimates = {
                agg: score_propagation(plan, pred, agg) for agg in aggregators
            }
            out.append((true_score, estimates))
        return ci, out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            case_results = list(pool.map(run_case, range(n_cases)))
    else:
        case_results = [run_case(ci) for ci in range(n_cases)]

    for ci, rows in case_results:
        for li, (true_score, estimates) in enumerate(rows):
            for s in structures:
                true_by_case[s][ci, li] = true_score.per_structure[s]
                for agg in aggregators:
                    rca_by_case[agg][s][ci, li] = estimates[
                        agg
                    ].aggregate.per_structure[s]

    male_rows = [i for i, s in enumerate(sexes) if s == "M"]
    female_rows = [i for i, s in enumerate(sexes) if s == "F"]
    delta_true = {}
    delta_rca = {agg: {} for agg in aggregators}
    for s in structures:
        male_profile = true_by_case[s][male_rows].mean(axis=0)
        female_profile = true_by_case[s][female_rows].mean(axis=0)
        delta_true[s] = male_profile[:, None] - female_profile[None, :]
        for agg in aggregators:
            male_est = rca_by_case[agg][s][male_rows].mean(axis=0)
            female_est = rca_by_case[agg][s][female_rows].mean(axis=0)
            delta_rca[agg][s] = male_est[:, None] - female_est[None, :]

    return GridResult(
        structures=structures,
        level_numbers=tuple(lv.level for lv in levels),
        case_ids=tuple(c.case_id for c in corpus),
        sexes=sexes,
        true_by_case=true_by_case,
        rca_by_case=rca_by_case,
        delta_true=delta_true,
        delta_rca=delta_rca,
        warnings=tuple(notes),
    )
