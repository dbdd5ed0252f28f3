"""Command-line entry point.

Subcommands:

* ``estimate``       score every target case in a manifest without ground truth
* ``audit``          estimate, then compare two demographic groups
* ``synthetic-grid`` run the 12x12 graded-segmenter experiment on phantoms
* ``gen-phantoms``   export a phantom dataset (plus manifest) to disk

Exit codes: 0 success, 1 usage or input error, 2 computation failure.
The default worker count can be set via the SEGAUDIT_THREADS environment
variable; the ``--threads`` flag overrides it.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field, fields
from pathlib import Path

from .audit import CaseResult, audit
from .manifest import (
    Manifest,
    ManifestError,
    load_manifest,
    load_reference_db,
    load_target_cases,
    write_manifest,
    MANIFEST_VERSION,
)
from .metrics import dsc
from .phantoms import (
    DegradationLevel,
    build_corpus,
    build_reference_db,
    case_degradation_seed,
    degrade,
    run_grid,
    within_group_indices,
)
from .rca import AllRegistrationsFailedError, estimate_dsc_rca
from .registration import RegistrationConfig, RegistrationError, load_settings_file
from . import fileio, reports

__all__ = ["RunConfig", "main", "entrypoint"]

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_COMPUTE = 2

THREADS_ENV = "SEGAUDIT_THREADS"


@dataclass
class RunConfig:
    """Settings shared by all subcommands; see the README for the file format."""

    k: int = 5
    aggregator: str = "mean"
    registration: RegistrationConfig = dataclass_field(default_factory=RegistrationConfig)
    attribute: str = "sex"
    positive_group: str = "M"
    seed: int = 0
    out: Path = Path("segaudit-out")
    threads: int = 1
    thumb_size: int = 32

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("thread count must be at least 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.aggregator not in ("mean", "max"):
            raise ValueError("aggregator must be 'mean' or 'max'")
        self.out = Path(self.out)


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
        if value < 1:
            raise ValueError(f"{THREADS_ENV} must be at least 1, got {value}")
        return value
    return 1


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, optional settings file, and explicit CLI flags."""
    settings: dict = {}
    if getattr(args, "config", None):
        settings = dict(load_settings_file(Path(args.config)))
    reg_settings = settings.pop("registration", {})
    known = {f.name for f in fields(RunConfig)} - {"registration"}
    unknown = set(settings) - known
    if unknown:
        raise ValueError(f"unknown config settings: {sorted(unknown)}")
    merged = dict(settings)
    merged.setdefault("threads", _default_threads())
    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    return RunConfig(registration=RegistrationConfig.from_mapping(reg_settings), **merged)


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; this toolkit reserves 2
    # for computation failures, so remap to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _add_common_flags(p: argparse.ArgumentParser, manifest: bool = True):
    if manifest:
        p.add_argument("--manifest", required=True, help="path to the dataset manifest JSON")
    p.add_argument("--config", help="JSON or TOML settings file")
    p.add_argument("--k", type=int, help="number of references per case (default 5)")
    p.add_argument("--aggregator", choices=("mean", "max"),
                   help="per-reference score aggregation (default mean)")
    p.add_argument("--seed", type=int, help="master random seed (default 0)")
    p.add_argument("--threads", type=int,
                   help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--thumb-size", dest="thumb_size", type=int,
                   help="similarity thumbnail edge in pixels (default 32)")
    p.add_argument("--out", type=Path, help="output directory (default segaudit-out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segaudit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="estimate per-case quality without ground truth")
    _add_common_flags(p_est)
    p_est.set_defaults(handler=cmd_estimate)

    p_audit = sub.add_parser("audit", help="estimate, then compute demographic group gaps")
    _add_common_flags(p_audit)
    p_audit.add_argument("--attribute", help="protected attribute name (default sex)")
    p_audit.add_argument("--positive-group", dest="positive_group",
                         help="group whose mean comes first in the signed gap (default M)")
    p_audit.set_defaults(handler=cmd_audit)

    p_grid = sub.add_parser("synthetic-grid",
                            help="run the 12x12 graded-segmenter phantom experiment")
    _add_common_flags(p_grid, manifest=False)
    p_grid.add_argument("--n-cases", type=int, default=40,
                        help="test phantoms, split evenly by sex (default 40)")
    p_grid.add_argument("--n-references", type=int, default=12,
                        help="held-out reference phantoms (default 12)")
    p_grid.add_argument("--size", type=int, default=64, help="phantom edge in pixels")
    p_grid.add_argument("--noise", type=float, default=0.01,
                        help="phantom intensity noise std (default 0.01)")
    p_grid.set_defaults(handler=cmd_synthetic_grid)

    p_gen = sub.add_parser("gen-phantoms", help="export a phantom dataset with a manifest")
    _add_common_flags(p_gen, manifest=False)
    p_gen.add_argument("--n-cases", type=int, default=10)
    p_gen.add_argument("--n-references", type=int, default=8)
    p_gen.add_argument("--size", type=int, default=64)
    p_gen.add_argument("--noise", type=float, default=0.01)
    p_gen.add_argument("--level-male", type=int, default=12, choices=range(1, 13),
                       metavar="1..12", help="degradation level for male predictions")
    p_gen.add_argument("--level-female", type=int, default=12, choices=range(1, 13),
                       metavar="1..12", help="degradation level for female predictions")
    p_gen.add_argument("--no-gt", action="store_true",
                       help="omit target ground truth (pure unsupervised audit)")
    p_gen.set_defaults(handler=cmd_gen_phantoms)
    return parser


def _estimate_cases(manifest: Manifest, config: RunConfig) -> list[CaseResult]:
    db = load_reference_db(manifest)
    targets = load_target_cases(manifest)
    for t in targets:
        if t.pred is None:
            raise ManifestError(f"target case {t.case_id!r} has no predicted masks")

    def run_one(t):
        est = estimate_dsc_rca(
            t.image,
            t.pred,
            db,
            config.k,
            config.registration,
            aggregator=config.aggregator,
            case_id=t.case_id,
            thumb_size=config.thumb_size,
        )
        true = dsc(t.pred, t.gt) if t.gt is not None else None
        return CaseResult(t.case_id, est, t.attributes, true)

    if config.threads > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(run_one, targets))
    return [run_one(t) for t in targets]


def cmd_estimate(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    manifest = load_manifest(args.manifest)
    results = _estimate_cases(manifest, config)
    with reports.staged_outputs(config.out) as tmp:
        reports.write_estimates_csv(tmp / "estimates.csv", results)
        reports.write_estimates_json(tmp / "estimates.json", results)
    for res in results:
        agg = res.estimate.aggregate
        per = "  ".join(f"{s}={v:.4f}" for s, v in agg.per_structure.items())
        print(f"{res.case_id}: {per}  (k={res.estimate.k_used})")
    print(f"wrote estimates.csv, estimates.json -> {config.out}")
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    manifest = load_manifest(args.manifest)
    results = _estimate_cases(manifest, config)
    report = audit(results, config.attribute, config.positive_group)
    with reports.staged_outputs(config.out) as tmp:
        reports.write_audit_json(tmp / "audit.json", report)
        reports.write_audit_csv(tmp / "audit.csv", report)
        reports.render_audit_scatter(tmp / "scatter.svg", report)
    sign = (f"positive favors {report.positive.group_value}, "
            f"negative favors {report.negative.group_value}")
    for s in report.structures:
        print(
            f"delta_rca[{s}] = {report.delta_rca[s]:+.4f}  "
            f"(mean {report.positive.group_value} minus mean "
            f"{report.negative.group_value}; {sign})"
        )
        if report.delta_true is not None:
            print(f"delta_true[{s}] = {report.delta_true[s]:+.4f}")
    print(f"wrote audit.json, audit.csv, scatter.svg -> {config.out}")
    return EXIT_OK


def cmd_synthetic_grid(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    corpus = build_corpus(args.n_cases, size=args.size, seed=config.seed,
                          noise_level=args.noise)
    db = build_reference_db(args.n_references, size=args.size, seed=config.seed,
                            noise_level=args.noise)
    grid = run_grid(
        corpus,
        db,
        k=config.k,
        cfg=config.registration,
        seed=config.seed,
        workers=config.threads,
        thumb_size=config.thumb_size,
    )
    extra = {
        "seed": config.seed,
        "k": config.k,
        "n_cases": args.n_cases,
        "n_references": args.n_references,
        "size": args.size,
        "noise": args.noise,
    }
    with reports.staged_outputs(config.out) as tmp:
        reports.write_grid_csvs(tmp / "grid_true.csv", tmp / "grid_rca.csv",
                                grid, config.aggregator)
        reports.write_grid_summary(tmp / "summary.json", grid, config.aggregator, extra)
        reports.render_grid_heatmap(tmp / "heatmap_true.svg", grid, "true")
        reports.render_grid_heatmap(tmp / "heatmap_rca.svg", grid, "rca",
                                    config.aggregator)
        reports.render_grid_scatter(tmp / "grid_scatter.svg", grid, config.aggregator)
    summary = reports.grid_summary_dict(grid, config.aggregator)
    for s, stats in summary["structures"].items():
        agr = stats["sign_agreement"]
        print(
            f"{s}: pearson_r={stats['pearson_r']:.3f} slope={stats['slope']:.3f} "
            f"sign_agreement 0/0.01/0.02 = "
            f"{agr['0.0']:.3f}/{agr['0.01']:.3f}/{agr['0.02']:.3f}"
        )
    print(f"wrote grid_true.csv, grid_rca.csv, heatmap_true.svg, heatmap_rca.svg, "
          f"grid_scatter.svg, summary.json -> {config.out}")
    return EXIT_OK


def cmd_gen_phantoms(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    corpus = build_corpus(args.n_cases, size=args.size, seed=config.seed,
                          noise_level=args.noise)
    db = build_reference_db(args.n_references, size=args.size, seed=config.seed,
                            noise_level=args.noise)
    level_for_sex = {
        "M": DegradationLevel.for_level(args.level_male),
        "F": DegradationLevel.for_level(args.level_female),
    }
    cases = []
    with reports.staged_outputs(config.out) as tmp:
        (tmp / "images").mkdir()
        (tmp / "gt").mkdir()
        (tmp / "pred").mkdir()
        for rec in db.records:
            fileio.save_image(rec.image, tmp / "images" / f"{rec.id}.png")
            gt_paths = {s: f"gt/{rec.id}_{s}.png" for s in rec.mask.structures}
            fileio.save_mask(rec.mask, {s: tmp / p for s, p in gt_paths.items()})
            cases.append({
                "id": rec.id,
                "image": f"images/{rec.id}.png",
                "gt_masks": gt_paths,
                "attributes": dict(rec.attributes),
                "reference": True,
            })
        group_indices = within_group_indices([c.attributes["sex"] for c in corpus])
        for ci, case in enumerate(corpus):
            fileio.save_image(case.image, tmp / "images" / f"{case.case_id}.png")
            pred = degrade(
                case.mask,
                level_for_sex[case.attributes["sex"]],
                case_degradation_seed(config.seed, group_indices[ci]),
            )
            pred_paths = {s: f"pred/{case.case_id}_{s}.png" for s in pred.structures}
            fileio.save_mask(pred, {s: tmp / p for s, p in pred_paths.items()})
            entry = {
                "id": case.case_id,
                "image": f"images/{case.case_id}.png",
                "pred_masks": pred_paths,
                "attributes": dict(case.attributes),
                "reference": False,
            }
            if not args.no_gt:
                gt_paths = {s: f"gt/{case.case_id}_{s}.png" for s in case.mask.structures}
                fileio.save_mask(case.mask, {s: tmp / p for s, p in gt_paths.items()})
                entry["gt_masks"] = gt_paths
            cases.append(entry)
        write_manifest(
            {
                "version": MANIFEST_VERSION,
                "structures": list(corpus[0].mask.structures),
                "cases": cases,
            },
            tmp / "manifest.json",
        )
    print(f"wrote {len(corpus)} target and {len(db.records)} reference phantoms "
          f"-> {config.out / 'manifest.json'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RegistrationError, AllRegistrationsFailedError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (ArithmeticError, RuntimeError, OSError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
