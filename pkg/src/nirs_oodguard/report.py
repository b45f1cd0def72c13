"""Report emission: delimited CSV, a text table mirroring the result-table
layout, projection exports, and matplotlib figures rendered next to the CSVs.

Report CSV layout: two leading ``#`` metadata lines (config hash, master
seed), a header row, one ``fold`` row per subject x fold, one
``subject_mean`` row per subject, and ``aggregate_mean`` / ``aggregate_std``
rows across subjects. Acceptance/exclusion columns are present only for
two-stage runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import GroupTag
from .harness import ExperimentReport, FoldResult, ProjectionResult, Subspace, _row_value

#: Scatter colors for the OOD families (and in-distribution data).
TAG_COLORS = {
    GroupTag.IN_DIST: "black",
    GroupTag.OOD_UNIFORM: "green",
    GroupTag.OOD_GAUSS: "red",
    GroupTag.OOD_MIX_HEAVY: "blue",
    GroupTag.OOD_MIX_MODERATE: "cyan",
    GroupTag.OOD_CHANNEL_PERM: "purple",
}

_BASE_COLUMNS = ["record_kind", "subject_id", "fold_index", "seed"]


def _metric_columns(report: ExperimentReport) -> list[str]:
    return list(report.aggregate.keys())


def write_report_csv(report: ExperimentReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics = _metric_columns(report)
    lines = [
        f"# config_hash={report.config_hash}",
        f"# master_seed={report.master_seed}",
        ",".join(_BASE_COLUMNS + metrics),
    ]
    for row in report.fold_rows:
        cells = ["fold", row.subject_id, str(row.fold_index), str(row.fold_seed)]
        cells += [f"{_row_value(row, m):.6f}" for m in metrics]
        lines.append(",".join(cells))
    for sid in sorted(report.per_subject):
        cells = ["subject_mean", sid, "", ""]
        cells += [f"{report.per_subject[sid][m]:.6f}" for m in metrics]
        lines.append(",".join(cells))
    for kind, idx in (("aggregate_mean", 0), ("aggregate_std", 1)):
        cells = [kind, "", "", ""]
        cells += [f"{report.aggregate[m][idx]:.6f}" for m in metrics]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass(frozen=True)
class ParsedReport:
    """Report CSV contents as read back for formatting."""

    metrics: tuple[str, ...]
    fold_rows: tuple[dict, ...]
    aggregate_mean: dict
    aggregate_std: dict
    config_hash: str
    master_seed: str


def read_report_csv(path: str | Path) -> ParsedReport:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"report file not found: {path}")
    config_hash = ""
    master_seed = ""
    rows = []
    with path.open() as fh:
        lineno = 0
        header: Optional[list[str]] = None
        for raw in fh:
            lineno += 1
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if "config_hash=" in line:
                    config_hash = line.split("=", 1)[1].strip()
                elif "master_seed=" in line:
                    master_seed = line.split("=", 1)[1].strip()
                continue
            cells = line.split(",")
            if header is None:
                header = cells
                for col in _BASE_COLUMNS:
                    if col not in header:
                        raise ValueError(f"{path}: line {lineno}: missing column {col!r}")
                continue
            if len(cells) != len(header):
                raise ValueError(
                    f"{path}: line {lineno}: {len(cells)} cells but header has {len(header)}"
                )
            rows.append((lineno, dict(zip(header, cells))))
    if header is None:
        raise ValueError(f"{path}: no header row")
    metrics = tuple(c for c in header if c not in _BASE_COLUMNS)
    if "accuracy" not in metrics:
        raise ValueError(f"{path}: missing required metric column 'accuracy'")

    fold_rows = []
    aggregate_mean: dict = {}
    aggregate_std: dict = {}
    for lineno, row in rows:
        kind = row["record_kind"]
        parsed = {}
        for m in metrics:
            try:
                parsed[m] = float(row[m])
            except ValueError:
                raise ValueError(
                    f"{path}: line {lineno}, column {m!r}: not a number: {row[m]!r}"
                ) from None
        if kind == "fold":
            fold_rows.append({**row, **parsed})
        elif kind == "aggregate_mean":
            aggregate_mean = parsed
        elif kind == "aggregate_std":
            aggregate_std = parsed
        elif kind != "subject_mean":
            raise ValueError(f"{path}: line {lineno}: unknown record_kind {kind!r}")
    if not aggregate_mean or not aggregate_std:
        raise ValueError(f"{path}: missing aggregate_mean/aggregate_std rows")
    return ParsedReport(
        metrics=metrics, fold_rows=tuple(fold_rows),
        aggregate_mean=aggregate_mean, aggregate_std=aggregate_std,
        config_hash=config_hash, master_seed=master_seed,
    )


#: Result-table columns in the published order; None cells print as "x"
#: (metric not applicable, matching the baselines in the tables).
_TABLE_LAYOUT = [
    ("Accuracy", "accuracy"),
    ("Confidence @ In-Dist", "confidence_in"),
    ("Acceptance @ In-Dist", "acceptance_rate"),
    ("Exclusion @ OOD (noise, low difficulty)", "exclusion_gauss"),
    ("Exclusion @ OOD (high difficulty)", "exclusion_channel_perm"),
]


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def format_table(mean: dict, std: dict, model_name: str = "model") -> str:
    """Text table mirroring the result-score tables, one row per model."""
    extra = sorted(m for m in mean
                   if m.startswith("exclusion_")
                   and m not in ("exclusion_gauss", "exclusion_channel_perm"))
    headers = ["Model"] + [h for h, _ in _TABLE_LAYOUT] + [f"Exclusion @ {m[len('exclusion_'):]}"
                                                           for m in extra]
    cells = [model_name]
    for _header, metric in _TABLE_LAYOUT:
        cells.append(format_cell(mean[metric], std[metric]) if metric in mean else "x")
    for m in extra:
        cells.append(format_cell(mean[m], std[m]))
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    line = " | ".join(h.ljust(w) for h, w in zip(headers, widths))
    sep = "-+-".join("-" * w for w in widths)
    row = " | ".join(c.ljust(w) for c, w in zip(cells, widths))
    return "\n".join([line, sep, row])


def format_report_table(report: ExperimentReport, model_name: str) -> str:
    mean = {m: v[0] for m, v in report.aggregate.items()}
    std = {m: v[1] for m, v in report.aggregate.items()}
    return format_table(mean, std, model_name)


# -- projections and figures --------------------------------------------------


def write_projection_csv(proj: ProjectionResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x,y,tag,label"]
    for (x, y), tag, label in zip(proj.points, proj.tags, proj.labels):
        lab = "" if label is None else str(label)
        lines.append(f"{x:.10g},{y:.10g},{tag.value},{lab}")
    path.write_text("\n".join(lines) + "\n")
    return path


def render_projection_figure(proj: ProjectionResult, path: str | Path, title: str = "") -> Path:
    """Scatter of the 2-D projection, colored by OOD family. In the
    classifier subspace, in-distribution points are colored by class."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = proj.points
    tags = np.array([t.value for t in proj.tags])
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    for tag in TAG_COLORS:
        mask = tags == tag.value
        if not mask.any():
            continue
        if tag is GroupTag.IN_DIST and proj.subspace is Subspace.CLASSIFIER:
            labels = np.array([-1 if l is None else l for l in proj.labels])
            cmap = plt.get_cmap("tab10")
            for cls in sorted(set(labels[mask])):
                sub = mask & (labels == cls)
                ax.scatter(points[sub, 0], points[sub, 1], s=12,
                           color=cmap(cls % 10), label=f"class {cls}", alpha=0.8)
        else:
            ax.scatter(points[mask, 0], points[mask, 1], s=12,
                       color=TAG_COLORS[tag], label=tag.value, alpha=0.8)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, markerscale=1.5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_metrics_figure(report: ExperimentReport, path: str | Path) -> Path:
    """Bar chart of the aggregate rates with across-subject std bars."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics = [m for m in report.aggregate
               if m == "acceptance_rate" or m.startswith("exclusion_")]
    if not metrics:
        metrics = ["accuracy", "confidence_in"]
    means = [report.aggregate[m][0] for m in metrics]
    stds = [report.aggregate[m][1] for m in metrics]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(metrics)), 3.6))
    ax.bar(range(len(metrics)), means, yerr=stds, capsize=3, color="steelblue")
    ax.set_xticks(range(len(metrics)))
    ax.set_xticklabels([m.replace("_", "\n") for m in metrics], fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("rate")
    ax.set_title("aggregate rates (mean ± std across subjects)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
