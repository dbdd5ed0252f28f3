"""Report emission: delimited tables, JSON detail, and rendered figures.

All outputs for one command are written to a temporary directory first and
moved into place only after every file succeeded, so a failing run never
leaves partial or clobbered outputs behind. CSV cells use shortest
round-trip float formatting, which makes files byte-stable across runs and
thread counts. SVG figures are rendered with a fixed hash salt and no
timestamp metadata.
"""

import csv
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import TwoSlopeNorm  # noqa: E402

import numpy as np  # noqa: E402

from .audit import AuditReport, CaseResult, sign_agreement  # noqa: E402
from .phantoms import GridResult  # noqa: E402

__all__ = [
    "staged_outputs",
    "write_estimates_csv",
    "write_estimates_json",
    "write_audit_csv",
    "write_audit_json",
    "write_grid_csvs",
    "write_grid_summary",
    "render_audit_scatter",
    "render_grid_heatmap",
    "render_grid_scatter",
    "grid_summary_dict",
]

plt.rcParams["svg.hashsalt"] = "segaudit"

SUMMARY_THRESHOLDS = (0.0, 0.01, 0.02)


@contextmanager
def staged_outputs(out_dir):
    """Yield a scratch directory; on success move its files into ``out_dir``.

    Files are moved one by one with their relative paths preserved, only
    after the block completed. On any exception the scratch directory is
    discarded and pre-existing outputs stay untouched.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        yield tmp
        for item in sorted(p for p in tmp.rglob("*") if p.is_file()):
            target = out_dir / item.relative_to(tmp)
            target.parent.mkdir(parents=True, exist_ok=True)
            os.replace(item, target)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _fmt(value: float) -> str:
    return repr(float(value))


def _savefig(fig, path):
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


def write_estimates_csv(path, results: Sequence[CaseResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "structure", "dsc_rca", "k_used", "aggregator"])
        for res in results:
            est = res.estimate
            for s, v in est.aggregate.per_structure.items():
                writer.writerow([res.case_id, s, _fmt(v), est.k_used, est.aggregator])


def write_estimates_json(path, results: Sequence[CaseResult]) -> None:
    payload = {"cases": []}
    for res in results:
        est = res.estimate
        entry = {
            "case_id": res.case_id,
            "aggregator": est.aggregator,
            "k_used": est.k_used,
            "skipped_references": list(est.skipped),
            "attributes": dict(res.attributes),
            "aggregate": {
                "per_structure": dict(est.aggregate.per_structure),
                "macro_average": est.aggregate.macro_average,
            },
            "per_reference": [
                {
                    "reference_id": rid,
                    "per_structure": dict(score.per_structure),
                    "macro_average": score.macro_average,
                }
                for rid, score in est.per_reference
            ],
        }
        if res.true_dice is not None:
            entry["true_dice"] = dict(res.true_dice.per_structure)
        payload["cases"].append(entry)
    _write_json(path, payload)


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_audit_csv(path, report: AuditReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "attribute",
                "structure",
                "positive_group",
                "negative_group",
                "n_positive",
                "n_negative",
                "mean_rca_positive",
                "mean_rca_negative",
                "delta_rca",
                "mean_true_positive",
                "mean_true_negative",
                "delta_true",
            ]
        )
        for s in report.structures:
            has_true = report.delta_true is not None
            writer.writerow(
                [
                    report.attribute,
                    s,
                    report.positive.group_value,
                    report.negative.group_value,
                    report.positive.n_cases,
                    report.negative.n_cases,
                    _fmt(report.positive.mean_dsc_rca[s]),
                    _fmt(report.negative.mean_dsc_rca[s]),
                    _fmt(report.delta_rca[s]),
                    _fmt(report.positive.mean_dsc_true[s]) if has_true else "",
                    _fmt(report.negative.mean_dsc_true[s]) if has_true else "",
                    _fmt(report.delta_true[s]) if has_true else "",
                ]
            )


def write_audit_json(path, report: AuditReport) -> None:
    def group(g):
        out = {
            "group_value": g.group_value,
            "n_cases": g.n_cases,
            "mean_dsc_rca": dict(g.mean_dsc_rca),
            "case_ids": list(g.case_ids),
        }
        if g.mean_dsc_true is not None:
            out["mean_dsc_true"] = dict(g.mean_dsc_true)
        return out

    payload = {
        "attribute": report.attribute,
        "sign_convention": (
            f"delta = mean({report.positive.group_value}) - "
            f"mean({report.negative.group_value})"
        ),
        "positive_group": group(report.positive),
        "negative_group": group(report.negative),
        "delta_rca": dict(report.delta_rca),
    }
    if report.delta_true is not None:
        payload["delta_true"] = dict(report.delta_true)
    for key in ("sign_agreement", "pearson_r", "fitted_slope", "fitted_intercept"):
        value = getattr(report, key)
        if value is not None:
            payload[key] = value
    _write_json(path, payload)


def render_audit_scatter(path, report: AuditReport) -> None:
    """True vs estimated group gap, one point per structure."""
    fig, ax = plt.subplots(figsize=(5, 5))
    if report.delta_true is not None:
        xs = [report.delta_true[s] for s in report.structures]
        ys = [report.delta_rca[s] for s in report.structures]
        for s, x, y in zip(report.structures, xs, ys):
            ax.scatter([x], [y], label=s)
        lim = max(0.01, *(abs(v) for v in xs + ys)) * 1.2
        ax.plot([-lim, lim], [-lim, lim], "k--", lw=0.8, label="identity")
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
        ax.set_xlabel("true gap (delta Dice)")
    else:
        ys = [report.delta_rca[s] for s in report.structures]
        ax.bar(report.structures, ys)
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("structure")
    ax.set_ylabel("estimated gap (delta Dice, RCA)")
    ax.set_title(
        f"{report.attribute}: {report.positive.group_value} minus "
        f"{report.negative.group_value}"
    )
    if report.delta_true is not None:
        ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _savefig(fig, path)


def write_grid_csvs(true_path, rca_path, grid: GridResult, aggregator: str) -> None:
    with open(true_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["structure", "male_level", "female_level", "delta_true"])
        for s in grid.structures:
            matrix = grid.delta_true[s]
            for i, li in enumerate(grid.level_numbers):
                for j, lj in enumerate(grid.level_numbers):
                    writer.writerow([s, li, lj, _fmt(matrix[i, j])])
    with open(rca_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["structure", "male_level", "female_level", "aggregator", "delta_rca"]
        )
        for s in grid.structures:
            matrix = grid.delta_rca[aggregator][s]
            for i, li in enumerate(grid.level_numbers):
                for j, lj in enumerate(grid.level_numbers):
                    writer.writerow([s, li, lj, aggregator, _fmt(matrix[i, j])])


def grid_summary_dict(grid: GridResult, aggregator: str) -> dict:
    """Correlation, calibration, and sign-agreement summary per structure."""
    summary = {"aggregator": aggregator, "structures": {}}
    for s in grid.structures:
        dt, dr = grid.gap_pairs(s, aggregator)
        var = float(((dt - dt.mean()) ** 2).sum())
        if var > 0:
            slope = float(((dt - dt.mean()) * (dr - dr.mean())).sum() / var)
            intercept = float(dr.mean() - slope * dt.mean())
        else:
            slope = intercept = None
        denom = np.sqrt(((dt - dt.mean()) ** 2).sum() * ((dr - dr.mean()) ** 2).sum())
        pearson = float((dt - dt.mean()) @ (dr - dr.mean()) / denom) if denom else None
        agreement = {}
        retained = {}
        for threshold in SUMMARY_THRESHOLDS:
            frac, n = sign_agreement(list(zip(dt, dr)), threshold)
            agreement[str(threshold)] = frac
            retained[str(threshold)] = n
        summary["structures"][s] = {
            "pearson_r": pearson,
            "slope": slope,
            "intercept": intercept,
            "sign_agreement": agreement,
            "n_retained": retained,
        }
    return summary


def write_grid_summary(path, grid: GridResult, aggregator: str, extra: dict | None = None) -> None:
    payload = grid_summary_dict(grid, aggregator)
    payload["warnings"] = list(grid.warnings)
    if extra:
        payload.update(extra)
    _write_json(path, payload)


def render_grid_heatmap(path, grid: GridResult, which: str, aggregator: str = "mean") -> None:
    """12x12 signed-gap heatmaps (one panel per structure), diverging scale
    centered at zero; rows are the male group's level, columns the female's."""
    matrices = grid.delta_true if which == "true" else grid.delta_rca[aggregator]
    n = len(grid.structures)
    fig, axes = plt.subplots(1, n, figsize=(4.6 * n, 4.2), squeeze=False)
    peak = max(float(np.abs(m).max()) for m in matrices.values()) or 1e-6
    norm = TwoSlopeNorm(vcenter=0.0, vmin=-peak, vmax=peak)
    label = "true gap" if which == "true" else f"estimated gap ({aggregator})"
    for ax, s in zip(axes[0], grid.structures):
        im = ax.imshow(matrices[s], cmap="RdBu_r", norm=norm, origin="upper")
        ax.set_title(f"{s}: {label}")
        ax.set_xlabel("female group level")
        ax.set_ylabel("male group level")
        ticks = range(len(grid.level_numbers))
        ax.set_xticks(ticks, [str(v) for v in grid.level_numbers], fontsize=7)
        ax.set_yticks(ticks, [str(v) for v in grid.level_numbers], fontsize=7)
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    _savefig(fig, path)


def render_grid_scatter(path, grid: GridResult, aggregator: str = "mean") -> None:
    """Estimated vs true gap over all grid cells, with a least-squares fit."""
    fig, ax = plt.subplots(figsize=(5.2, 5.2))
    for s in grid.structures:
        dt, dr = grid.gap_pairs(s, aggregator)
        ax.scatter(dt, dr, s=12, alpha=0.6, label=s)
        var = float(((dt - dt.mean()) ** 2).sum())
        if var > 0:
            slope = float(((dt - dt.mean()) * (dr - dr.mean())).sum() / var)
            intercept = float(dr.mean() - slope * dt.mean())
            xs = np.array([dt.min(), dt.max()])
            ax.plot(xs, slope * xs + intercept, lw=1.0)
    lims = ax.get_xlim()
    ax.plot(lims, lims, "k--", lw=0.8, label="identity")
    ax.set_xlabel("true gap (delta Dice)")
    ax.set_ylabel(f"estimated gap (delta Dice, {aggregator})")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _savefig(fig, path)
