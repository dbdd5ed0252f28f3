"""Dataset manifests: one JSON file describing a portable image/mask corpus.

A manifest lists the ordered structure names and the cases. Each case has
an id, an image path, optional per-structure predicted and ground-truth
mask paths, free-form string attributes, and a reference flag. All paths
are relative to the manifest's directory, which keeps datasets diff-able
and movable. Example:

    {
      "version": 1,
      "structures": ["lung", "heart"],
      "cases": [
        {"id": "ref_000", "image": "images/ref_000.png",
         "gt_masks": {"lung": "gt/ref_000_lung.png", ...},
         "attributes": {"sex": "M"}, "reference": true},
        {"id": "case_000", "image": "images/case_000.png",
         "pred_masks": {...}, "gt_masks": {...},
         "attributes": {"sex": "F"}, "reference": false}
      ]
    }
"""

import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Mapping

from .core import Image, LabelMask
from .fileio import load_image, load_mask
from .rca import ReferenceDatabase, ReferenceRecord

__all__ = [
    "ManifestError",
    "ManifestCase",
    "Manifest",
    "TargetCase",
    "load_manifest",
    "write_manifest",
    "load_reference_db",
    "load_target_cases",
]

MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Manifest structure or referenced files are invalid."""


@dataclass(frozen=True)
class ManifestCase:
    id: str
    image: str
    pred_masks: Mapping[str, str] | None = None
    gt_masks: Mapping[str, str] | None = None
    attributes: Mapping[str, str] = dataclass_field(default_factory=dict)
    reference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "attributes", dict(self.attributes))
        if self.pred_masks is not None:
            object.__setattr__(self, "pred_masks", dict(self.pred_masks))
        if self.gt_masks is not None:
            object.__setattr__(self, "gt_masks", dict(self.gt_masks))


@dataclass(frozen=True)
class Manifest:
    version: int
    structures: tuple[str, ...]
    cases: tuple[ManifestCase, ...]
    root: Path

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    @property
    def reference_cases(self) -> tuple[ManifestCase, ...]:
        return tuple(c for c in self.cases if c.reference)

    @property
    def target_cases(self) -> tuple[ManifestCase, ...]:
        return tuple(c for c in self.cases if not c.reference)


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest file; every referenced path must exist."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    root = path.parent

    version = data.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {version!r}")
    structures = tuple(data.get("structures") or ())
    if not structures or len(set(structures)) != len(structures):
        raise ManifestError("structures must be a non-empty list of unique names")
    raw_cases = data.get("cases")
    if not raw_cases:
        raise ManifestError("manifest lists no cases")

    cases = []
    seen_ids = set()
    attr_keys = None
    for raw in raw_cases:
        cid = raw.get("id")
        if not cid:
            raise ManifestError("every case needs a non-empty id")
        if cid in seen_ids:
            raise ManifestError(f"duplicate case id {cid!r}")
        seen_ids.add(cid)
        image = raw.get("image")
        if not image:
            raise ManifestError(f"case {cid!r} has no image path")
        case = ManifestCase(
            id=cid,
            image=image,
            pred_masks=raw.get("pred_masks"),
            gt_masks=raw.get("gt_masks"),
            attributes=raw.get("attributes") or {},
            reference=bool(raw.get("reference", False)),
        )
        _check_paths(case, structures, root)
        if case.attributes:
            keys = frozenset(case.attributes)
            if attr_keys is None:
                attr_keys = keys
            elif keys != attr_keys:
                raise ManifestError(
                    f"case {cid!r} has attribute keys {sorted(keys)}, "
                    f"inconsistent with {sorted(attr_keys)}"
                )
        cases.append(case)
    return Manifest(
        version=version, structures=structures, cases=tuple(cases), root=root
    )


def _check_paths(case: ManifestCase, structures: tuple[str, ...], root: Path):
    if not (root / case.image).is_file():
        raise ManifestError(f"case {case.id!r}: image file missing: {case.image}")
    for kind, masks in (("pred", case.pred_masks), ("gt", case.gt_masks)):
        if masks is None:
            continue
        extra = set(masks) - set(structures)
        if extra:
            raise ManifestError(
                f"case {case.id!r}: {kind} masks name unknown structures {sorted(extra)}"
            )
        missing = set(structures) - set(masks)
        if missing:
            raise ManifestError(
                f"case {case.id!r}: {kind} masks missing structures {sorted(missing)}"
            )
        for s, rel in masks.items():
            if not (root / rel).is_file():
                raise ManifestError(
                    f"case {case.id!r}: {kind} mask file missing: {rel}"
                )


def write_manifest(manifest_dict: dict, path) -> None:
    """Serialize a manifest dictionary to disk (sorted keys, stable bytes)."""
    path = Path(path)
    path.write_text(
        json.dumps(manifest_dict, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


@dataclass(frozen=True, eq=False)
class TargetCase:
    """A non-reference case loaded into memory, ready for estimation."""

    case_id: str
    image: Image
    pred: LabelMask | None
    gt: LabelMask | None
    attributes: Mapping[str, str]


def load_reference_db(manifest: Manifest) -> ReferenceDatabase:
    """Load every reference-flagged case; each must carry ground truth."""
    records = []
    for case in manifest.reference_cases:
        if case.gt_masks is None:
            raise ManifestError(f"reference case {case.id!r} has no gt masks")
        records.append(
            ReferenceRecord(
                id=case.id,
                image=load_image(manifest.resolve(case.image)),
                mask=load_mask(
                    manifest.structures,
                    {s: manifest.resolve(p) for s, p in case.gt_masks.items()},
                ),
                attributes=case.attributes,
            )
        )
    if not records:
        raise ManifestError("manifest contains no reference cases")
    return ReferenceDatabase(tuple(records))


def load_target_cases(manifest: Manifest) -> tuple[TargetCase, ...]:
    out = []
    for case in manifest.target_cases:
        image = load_image(manifest.resolve(case.image))
        pred = gt = None
        if case.pred_masks is not None:
            pred = load_mask(
                manifest.structures,
                {s: manifest.resolve(p) for s, p in case.pred_masks.items()},
            )
        if case.gt_masks is not None:
            gt = load_mask(
                manifest.structures,
                {s: manifest.resolve(p) for s, p in case.gt_masks.items()},
            )
        out.append(TargetCase(case.id, image, pred, gt, dict(case.attributes)))
    if not out:
        raise ManifestError("manifest contains no target (non-reference) cases")
    return tuple(out)
