"""Report emission: correlation heatmaps, scatter plots, CSVs, arch diagrams.

SVG output is byte-deterministic: element ids are content-hashed via a
fixed hash salt, creation dates are stripped, and text stays text rather
than font-dependent glyph paths.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib import patches
from matplotlib.figure import Figure

from .analysis import CorrelationReport, ResultTable, fit_regression_ci
from .errors import DomainError
from .space import ArchitectureSpec, FAMILY_SEARCHED, KIND_ZERO

_SVG_RC = {
    "svg.hashsalt": "sslnas",
    "svg.fonttype": "none",
}


def _save_svg(fig: Figure, path: Path) -> None:
    with matplotlib.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results_csv(table: ResultTable, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "dataset", "top1", "params", "ratio"])
        for i, model in enumerate(table.models):
            for j, dataset in enumerate(table.datasets):
                writer.writerow(
                    [model, dataset, _fmt(float(table.accuracy[i, j])), table.params[i], _fmt(float(table.ratios[i]))]
                )


def write_corr_csv(report: CorrelationReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset_a", "dataset_b", "spearman", "pearson", "n"])
        d = len(report.datasets)
        for i in range(d):
            for j in range(i + 1, d):
                writer.writerow(
                    [
                        report.datasets[i],
                        report.datasets[j],
                        _fmt(float(report.spearman[i, j])),
                        _fmt(float(report.pearson[i, j])),
                        int(report.n[i, j]),
                    ]
                )


def render_heatmap(matrix: np.ndarray, labels, title: str, path: Path) -> None:
    d = len(labels)
    fig = Figure(figsize=(max(4.0, 0.9 * d + 2.0), max(3.5, 0.9 * d + 1.5)))
    ax = fig.add_subplot(111)
    im = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="RdYlGn")
    ax.set_xticks(range(d), labels=labels, rotation=45, ha="right")
    ax.set_yticks(range(d), labels=labels)
    for i in range(d):
        for j in range(d):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save_svg(fig, path)


def render_scatter(xs: np.ndarray, ys: np.ndarray, x_label: str, y_label: str, path: Path) -> None:
    fig = Figure(figsize=(4.5, 3.5))
    ax = fig.add_subplot(111)
    ax.scatter(xs, ys, s=18, color="#31688e", alpha=0.85, edgecolors="none")
    try:
        fit = fit_regression_ci(xs, ys)
        ax.plot(fit.x_grid, fit.y_fit, color="#b40426", linewidth=1.5)
        ax.fill_between(fit.x_grid, fit.lower, fit.upper, color="#b40426", alpha=0.2, linewidth=0)
    except DomainError:
        pass  # degenerate columns: points only
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    fig.tight_layout()
    _save_svg(fig, path)


_OP_COLORS = {
    (3, 3): "#a6cee3",
    (5, 3): "#6baed6",
    (7, 3): "#2171b5",
    (3, 6): "#fdae6b",
    (5, 6): "#f16913",
    (7, 6): "#d94801",
}


def render_arch_svg(arch: ArchitectureSpec, path: Path) -> None:
    """One box per cell in stage order; grey separators mark downsampling."""
    n = len(arch.cells)
    fig = Figure(figsize=(max(6.0, 0.62 * n + 1.5), 2.4))
    ax = fig.add_subplot(111)
    downsample_flags = None
    if arch.family == FAMILY_SEARCHED:
        downsample_flags = [s.downsamples for s in arch.space().stages]
    prev_stage = None
    for i, cell in enumerate(arch.cells):
        op = cell.op
        if cell.stage != prev_stage:
            if prev_stage is not None:
                downsamples = downsample_flags[cell.stage] if downsample_flags else True
                color = "#555555" if downsamples else "#cccccc"
                ax.axvline(i - 0.5, color=color, linewidth=1.4)
            prev_stage = cell.stage
        if getattr(op, "kind", None) == KIND_ZERO:
            face = "#eeeeee"
            label = "skip"
        elif hasattr(op, "kernel") and op.kernel is not None:
            face = _OP_COLORS.get((op.kernel, op.expansion), "#999999")
            label = op.label()
        else:
            face = "#b2df8a"
            label = op.label()
        ax.add_patch(patches.Rectangle((i - 0.42, 0.1), 0.84, 0.8, facecolor=face, edgecolor="#333333"))
        ax.text(i, 0.5, label, rotation=90, ha="center", va="center", fontsize=7)
        ax.text(i, -0.08, str(cell.stage + 1), ha="center", va="top", fontsize=6, color="#666666")
    ax.set_xlim(-0.8, n - 0.2)
    ax.set_ylim(-0.25, 1.05)
    ax.set_axis_off()
    ax.set_title(f"{arch.family} (width {arch.width_multiplier:g}), stages along the bottom", fontsize=9)
    fig.tight_layout()
    _save_svg(fig, path)


def emit_report(
    report: CorrelationReport,
    table: ResultTable,
    out_dir: str | Path,
    archs: dict[str, ArchitectureSpec] | None = None,
) -> list[Path]:
    """Write CSVs, heatmaps, per-pair scatters, and optional arch diagrams.

    Returns the written paths; output bytes are deterministic for fixed
    inputs.
    """
    if len(table.models) == 0 or len(table.datasets) == 0:
        raise DomainError("cannot emit a report for an empty table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    results_csv = out / "results.csv"
    write_results_csv(table, results_csv)
    written.append(results_csv)

    corr_csv = out / "corr.csv"
    write_corr_csv(report, corr_csv)
    written.append(corr_csv)

    spearman_svg = out / "heatmap_spearman.svg"
    render_heatmap(report.spearman, report.datasets, "Spearman rank correlation", spearman_svg)
    written.append(spearman_svg)

    pearson_svg = out / "heatmap_pearson.svg"
    render_heatmap(report.pearson, report.datasets, "Pearson linear correlation", pearson_svg)
    written.append(pearson_svg)

    d = len(table.datasets)
    for i in range(d):
        for j in range(i + 1, d):
            name = out / f"scatter_{_slug(table.datasets[i])}_vs_{_slug(table.datasets[j])}.svg"
            render_scatter(
                table.accuracy[:, i], table.accuracy[:, j],
                f"{table.datasets[i]} top-1", f"{table.datasets[j]} top-1", name,
            )
            written.append(name)

    for name, arch in (archs or {}).items():
        path = out / f"arch_{_slug(name)}.svg"
        render_arch_svg(arch, path)
        written.append(path)
    return written
