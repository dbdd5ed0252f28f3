"""segaudit: segmentation quality estimation and bias audits without ground truth.

The toolkit estimates how good a predicted segmentation is by registering
its image onto a reference database and scoring the propagated mask
against known references, then uses those estimates to compare model
performance between demographic subgroups when no annotations exist for
the audited population.
"""

from .core import (
    AffineTransform2D,
    DisplacementField,
    Image,
    LabelMask,
    affine_to_field,
    box_resize,
    compose_fields,
    gaussian_smooth,
    resample_image,
    warp_mask,
)
from .metrics import DiceScore, dsc
from .similarity import SimilarityRanking, ncc, top_k_select
from .registration import (
    DemonsIterationStats,
    RegistrationConfig,
    RegistrationError,
    RegistrationResult,
    register,
    register_affine,
    register_deformable,
)
from .rca import (
    AllRegistrationsFailedError,
    PropagationPlan,
    RcaEstimate,
    ReferenceDatabase,
    ReferenceRecord,
    estimate_dsc_rca,
    plan_propagation,
    score_propagation,
)
from .audit import AuditReport, CaseResult, GroupStats, audit, sign_agreement
from .phantoms import (
    DegradationLevel,
    GridResult,
    PhantomCase,
    PhantomSpec,
    ShapeParams,
    build_corpus,
    build_reference_db,
    case_degradation_seed,
    degradation_schedule,
    degrade,
    generate_phantom,
    make_spec,
    run_grid,
    within_group_indices,
)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform2D",
    "AllRegistrationsFailedError",
    "AuditReport",
    "CaseResult",
    "DegradationLevel",
    "DemonsIterationStats",
    "DiceScore",
    "DisplacementField",
    "GridResult",
    "GroupStats",
    "Image",
    "LabelMask",
    "PhantomCase",
    "PhantomSpec",
    "PropagationPlan",
    "RcaEstimate",
    "ReferenceDatabase",
    "ReferenceRecord",
    "RegistrationConfig",
    "RegistrationError",
    "RegistrationResult",
    "ShapeParams",
    "SimilarityRanking",
    "affine_to_field",
    "audit",
    "box_resize",
    "build_corpus",
    "build_reference_db",
    "case_degradation_seed",
    "compose_fields",
    "degradation_schedule",
    "degrade",
    "dsc",
    "estimate_dsc_rca",
    "gaussian_smooth",
    "generate_phantom",
    "make_spec",
    "ncc",
    "plan_propagation",
    "register",
    "register_affine",
    "register_deformable",
    "resample_image",
    "run_grid",
    "score_propagation",
    "sign_agreement",
    "within_group_indices",
    "top_k_select",
    "warp_mask",
    "__version__",
]
