"""Rendering stored evaluation reports: a fixed-order text table (macro-F1 to
two decimals, one row per prompting regime) and machine-readable records."""

from __future__ import annotations

import json

ROW_TITLES = {
    "zero_shot": "zero-shot",
    "few_shot": "few-shot",
    "clustered_instructions": "clustered-instructions",
    "post_resolution": "post-conflict-resolution",
}
ROW_ORDER = ("zero_shot", "few_shot", "clustered_instructions", "post_resolution")


def _ordered(reports: dict[str, dict]) -> list[tuple[str, dict]]:
    ordered = [(row, reports[row]) for row in ROW_ORDER if row in reports]
    extras = [(row, report) for row, report in reports.items() if row not in ROW_ORDER]
    return ordered + sorted(extras)


def summary_table(reports: dict[str, dict]) -> str:
    """Markdown-free fixed-width table keyed by regime row."""
    rows = _ordered(reports)
    split = next((r.get("split") for _, r in rows if r.get("split")), None)
    lines = []
    if split:
        lines.append(f"# evaluation split: {split} (engine default is test)")
    width = max([len(ROW_TITLES.get(row, row)) for row, _ in rows] + [len("method")])
    lines.append(f"{'method'.ljust(width)}  macro-F1      n")
    for row, report in rows:
        title = ROW_TITLES.get(row, row)
        lines.append(f"{title.ljust(width)}  {report['macro_f1']:8.2f}  {report['n']:5d}")
    return "\n".join(lines)


def summary_records(reports: dict[str, dict]) -> list[str]:
    """One JSON line per regime row, machine-readable."""
    lines = []
    for row, report in _ordered(reports):
        lines.append(
            json.dumps(
                {
                    "row": ROW_TITLES.get(row, row),
                    "regime": report["regime"],
                    "instruction_set_version": report.get("instruction_set_version"),
                    "split": report.get("split"),
                    "n": report["n"],
                    "macro_f1": report["macro_f1"],
                    "abstain_count": report["abstain_count"],
                },
                ensure_ascii=False,
            )
        )
    return lines
