"""
Report rendering: JSON documents and aligned plain-text tables.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from config.logging import to_builtin


def _json_default(value):
    converted = to_builtin(value)
    if converted is value:
        return str(value)
    return converted


def _clean(value):
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)) and not math.isfinite(float(value)):
        return None
    return value


def to_json(document) -> str:
    if hasattr(document, "to_dict"):
        document = document.to_dict()
    return json.dumps(_clean(to_builtin(document)), indent=2, sort_keys=True, default=_json_default, allow_nan=False)


def write_json(document, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(document) + "\n", encoding="utf-8")
    return path


def format_cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.4f}" if math.isfinite(float(value)) else "-"
    if isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(v, (int, np.integer)) for v in value):
        return f"{value[0]}x{value[1]}"
    return str(value)


def format_table(columns: Sequence[str], rows: Sequence[dict], title: str = "") -> str:
    """
    Render rows as a fixed-width table; text columns are left-aligned and
    numeric columns right-aligned.
    """
    cells = [[format_cell(row.get(c)) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    numeric = [
        bool(rows) and all(isinstance(row.get(c), (int, float, np.number)) and not isinstance(row.get(c), bool) for row in rows)
        for c in columns
    ]

    def line(values):
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(values, widths, numeric)).rstrip()

    out = []
    if title:
        out.append(title)
    out.append(line(list(columns)))
    out.append("  ".join("-" * w for w in widths))
    out.extend(line(r) for r in cells)
    return "\n".join(out)


def metrics_table(report) -> str:
    """Summary row plus per-threshold and per-class AP of a MetricsReport."""
    summary = format_table(
        ["ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large", "images"],
        [{**report.to_dict(), "images": report.num_images}],
        title="Detection AP",
    )
    thresholds = format_table(
        ["iou", "ap"],
        [{"iou": k, "ap": v} for k, v in report.ap_per_threshold.items()],
        title="AP per IoU threshold",
    )
    per_class = format_table(
        ["class", "ap", "accuracy"],
        [{"class": name, "ap": ap, "accuracy": report.class_accuracy.get(name)} for name, ap in report.ap_per_class.items()],
        title="Per class",
    )
    return "\n\n".join([summary, thresholds, per_class])


def ablation_table(report) -> str:
    return format_table(report.columns, report.rows, title=f"{report.title} ({report.name})")


def cost_table(report) -> str:
    h, w = report.image_size
    return format_table(
        ["mode", "head_parameters", "total_parameters", "macs", "latency_ms", "latency_std_ms", "runs"],
        [vars(r) for r in report.rows],
        title=f"Cost on a fixed {h}x{w} input",
    )


def gradcheck_table(report) -> str:
    rows = [vars(e) for e in report.entries]
    status = "PASS" if report.passed else "FAIL"
    return format_table(
        ["site", "max_rel_error", "worst_element", "elements", "passed"],
        rows,
        title=f"Gradient check: {status} (max rel error {report.max_rel_error:.3e}, tolerance {report.tolerance:g})",
    )
