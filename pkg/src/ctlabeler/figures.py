"""Figure rendering for evaluation outputs (headless, file-based)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import MetricsRow, UrgencyRow

_URGENCY_COLORS = ("#4c9f70", "#e3c567", "#e0893e", "#c0392b")
_URGENCY_NAMES = ("normal or chronic", "low", "medium", "high")


def save_score_figure(
    rows: Sequence[MetricsRow], path: str | Path, *, score: str = "f1"
) -> None:
    """Horizontal point-and-interval chart of per-cell scores per labeler."""
    cell_rows = [row for row in rows if row.kind == "cell"]
    if not cell_rows:
        return
    labelers: list[str] = []
    for row in cell_rows:
        if row.labeler not in labelers:
            labelers.append(row.labeler)
    cells: list[tuple[str, str]] = []
    for row in cell_rows:
        key = (row.organ, row.finding_group)
        if key not in cells:
            cells.append(key)
    height = max(3.0, 0.45 * len(cells) + 1.5)
    fig, ax = plt.subplots(figsize=(7.5, height))
    offsets = [
        (i - (len(labelers) - 1) / 2) * 0.18 for i in range(len(labelers))
    ]
    for labeler, offset in zip(labelers, offsets):
        xs, ys, low_err, high_err = [], [], [], []
        for row in cell_rows:
            if row.labeler != labeler:
                continue
            y = cells.index((row.organ, row.finding_group))
            value = row.scores.get(score)
            if value is None:
                continue
            xs.append(value)
            ys.append(y + offset)
            low_err.append(value - row.ci_low if row.ci_low is not None else 0.0)
            high_err.append(row.ci_high - value if row.ci_high is not None else 0.0)
        if xs:
            ax.errorbar(
                xs, ys, xerr=[low_err, high_err], fmt="o", capsize=3,
                markersize=4, label=labeler,
            )
    ax.set_yticks(range(len(cells)))
    ax.set_yticklabels([f"{organ} / {group}" for organ, group in cells], fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel(score)
    ax.set_xlim(-0.02, 1.02)
    ax.grid(axis="x", linestyle=":", linewidth=0.6, alpha=0.6)
    if len(labelers) > 1:
        ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_urgency_figure(rows: Sequence[UrgencyRow], path: str | Path) -> None:
    """Bar chart of per-organ-group rank correlations with intervals."""
    cell_rows = [row for row in rows if row.kind == "cell"]
    if not cell_rows:
        return
    names = [row.organ_group for row in cell_rows]
    values = [row.tau_b for row in cell_rows]
    fig, ax = plt.subplots(figsize=(7.5, 3.5))
    positions = range(len(cell_rows))
    ax.bar(positions, values, width=0.6, color="#4878a8")
    for i, row in enumerate(cell_rows):
        if row.ci_low is not None and row.ci_high is not None:
            ax.vlines(i, row.ci_low, row.ci_high, color="#1f3044", linewidth=1.5)
    ax.set_xticks(list(positions))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("Kendall tau-b")
    ax.set_ylim(-1.05, 1.05)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.grid(axis="y", linestyle=":", linewidth=0.6, alpha=0.6)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_prevalence_figure(
    prevalence: Mapping[str, Mapping[int, float]], path: str | Path
) -> None:
    """Stacked horizontal bars of urgency-level percentages per labeler."""
    if not prevalence:
        return
    labelers = list(prevalence)
    fig, ax = plt.subplots(figsize=(7.5, 0.5 * len(labelers) + 1.6))
    lefts = [0.0] * len(labelers)
    for level in (0, 1, 2, 3):
        widths = [prevalence[labeler].get(level, 0.0) for labeler in labelers]
        ax.barh(
            range(len(labelers)), widths, left=lefts, height=0.6,
            color=_URGENCY_COLORS[level], label=_URGENCY_NAMES[level],
        )
        lefts = [left + width for left, width in zip(lefts, widths)]
    ax.set_yticks(range(len(labelers)))
    ax.set_yticklabels(labelers, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("percent of labeled findings")
    ax.set_xlim(0, 100)
    ax.legend(loc="lower right", fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
