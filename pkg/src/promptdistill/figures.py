"""Matplotlib renderings of stored evaluation reports, written next to the
delimited report artifacts: a macro-F1 bar chart across regimes and one
confusion-matrix heatmap per regime."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .reporting import ROW_ORDER, ROW_TITLES


def _ordered_rows(reports: dict[str, dict]) -> list[str]:
    ordered = [row for row in ROW_ORDER if row in reports]
    return ordered + sorted(set(reports) - set(ROW_ORDER))


def render_macro_f1_bar(reports: dict[str, dict], path: Path) -> None:
    rows = _ordered_rows(reports)
    titles = [ROW_TITLES.get(r, r) for r in rows]
    values = [reports[r]["macro_f1"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(rows), 3.6))
    bars = ax.bar(titles, values, color="#4878a8")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("macro-F1")
    ax.set_title("macro-F1 by prompting regime")
    ax.bar_label(bars, fmt="%.2f", padding=2)
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_confusion_heatmap(report: dict, title: str, path: Path) -> None:
    labels = report["confusion_labels"]
    matrix = np.asarray(report["confusion"], dtype=float)
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(labels), 1.0 + 0.8 * len(labels)))
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    ax.set_title(title)
    threshold = matrix.max() / 2 if matrix.max() else 0.5
    for i in range(len(labels)):
        for j in range(len(labels)):
            count = int(matrix[i, j])
            ax.text(
                j,
                i,
                str(count),
                ha="center",
                va="center",
                color="white" if matrix[i, j] > threshold else "black",
                fontsize=9,
            )
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_figures(reports: dict[str, dict], out_dir: Path) -> dict[str, str]:
    """Render all figures for a report bundle.

    Returns {artifact_kind: filename relative to out_dir}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}
    bar = out_dir / "macro_f1_by_regime.png"
    render_macro_f1_bar(reports, bar)
    artifacts["figure_macro_f1"] = bar.name
    for row in _ordered_rows(reports):
        path = out_dir / f"confusion_{row}.png"
        render_confusion_heatmap(reports[row], ROW_TITLES.get(row, row), path)
        artifacts[f"figure_confusion_{row}"] = path.name
    return artifacts
