"""
Ablation runner.

A grid maps dimension names to value lists; its cells are the cartesian
product in key order. Every cell trains a detector from the shared base
config (only the cell's keys changed) and evaluates it on the held-out
split. The row layout of a report depends only on the grid, never on the
numbers a run produces.

Usage:
    grid = parse_grid("mode=baseline,dense_no_attention;r=4,8,16")
    report = ablate(cfg, grid, out_dir="runs/ablation")
    report = ablate(cfg, preset="attention_placement", out_dir="runs/attention_placement")
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import structlog
from django.conf import settings

from config.observability import bind_context
from detection.cost import measure_latency
from detection.evaluation import evaluate
from detection.exceptions import ConfigError
from detection.experiment import MODES, VARIANTS, ExperimentConfig, parse_pool_size
from detection.synthetic import SyntheticDataset
from detection.training import train

logger = structlog.get_logger(__name__)

GRID_KEYS = ("mode", "pool_size", "variant", "r", "rpn_recalibrate", "seed")
METRIC_COLUMNS = ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large")
LATENCY_COLUMN = "latency_ms"


@dataclass(frozen=True)
class AblationPreset:
    name: str
    title: str
    grid: dict
    # fixed overrides applied to the base config before the grid
    overrides: dict = field(default_factory=dict)
    latency: bool = False


PRESETS = {
    preset.name: preset
    for preset in (
        AblationPreset("dense_connection", "Effect of dense connection", {"mode": ["baseline", "dense_no_attention"]}),
        AblationPreset(
            "pool_size",
            "Pooling size of the global context",
            # pooled P2 extents from P2 itself (32x32 for 128x128 scenes) down to 8x8
            {"pool_size": [(32, 32), (24, 24), (16, 16), (8, 8)]},
            {"mode": "full"},
        ),
        AblationPreset("attention_placement", "Attention placement", {"variant": list(VARIANTS)}, {"mode": "full"}),
        AblationPreset("reduction_ratio", "Reduction ratio", {"r": [4, 8, 16]}, {"mode": "full"}),
        AblationPreset(
            "rpn_recalibration",
            "RPN feature recalibration",
            {"mode": ["baseline", "full"], "rpn_recalibrate": [False, True]},
        ),
        AblationPreset(
            "lightweight",
            "Lightweight head",
            {"mode": ["baseline", "full", "lightweight"]},
            latency=True,
        ),
        AblationPreset(
            "context",
            "Background-hue context",
            {"mode": ["baseline", "full"], "seed": [0, 1, 2]},
            {"contextual_mode": True, "num_classes": 4},
        ),
    )
}


@dataclass
class AblationReport:
    name: str
    title: str
    grid_keys: list
    columns: list
    rows: list = field(default_factory=list)
    base_config: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "title": self.title,
            "grid_keys": list(self.grid_keys),
            "columns": list(self.columns),
            "rows": self.rows,
            "base_config": self.base_config,
            "seconds": self.seconds,
        }


# ========================================
# Grid handling
# ========================================


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Expected a boolean, got {text!r}")


def _parse_value(key: str, text: str):
    text = text.strip()
    if key == "pool_size":
        return parse_pool_size(text)
    if key == "rpn_recalibrate":
        return _parse_bool(text)
    if key in ("r", "seed"):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{key} expects integers, got {text!r}") from exc
    return text


def parse_grid(text: str) -> dict:
    """
    Parse "key=v1,v2;key2=v3" into a grid dict.

    An empty string is the empty grid.
    """
    grid: dict[str, list] = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"Grid entry {part!r} must look like key=v1,v2")
        grid[key] = [_parse_value(key, v) for v in values.split(",") if v.strip()]
    return validate_grid(grid)


def validate_grid(grid: Optional[dict]) -> dict:
    """
    Raises:
        ConfigError: for a key outside GRID_KEYS, an empty value list or an
            unknown mode/variant
    """
    grid = dict(grid or {})
    for key, values in grid.items():
        if key not in GRID_KEYS:
            raise ConfigError(f"Invalid grid key {key!r}; expected one of {', '.join(GRID_KEYS)}")
        if not values:
            raise ConfigError(f"Grid key {key!r} has no values")
        if key == "mode" and any(v not in MODES for v in values):
            raise ConfigError(f"Grid modes must be among {MODES}, got {values}")
        if key == "variant" and any(v not in VARIANTS for v in values):
            raise ConfigError(f"Grid variants must be among {VARIANTS}, got {values}")
        if key == "pool_size":
            grid[key] = [tuple(v) for v in values]
    return grid


def expand_grid(grid: dict) -> list[dict]:
    """Cells in row-major key order; the empty grid has one empty cell."""
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cell_label(cell: dict) -> str:
    if not cell:
        return "default"
    parts = []
    for key, value in cell.items():
        if key == "pool_size":
            value = f"{value[0]}x{value[1]}"
        parts.append(f"{key}-{value}")
    return "_".join(parts)


def columns_for(grid: dict, latency: bool = False) -> list[str]:
    columns = list(grid) + list(METRIC_COLUMNS)
    if latency:
        columns.append(LATENCY_COLUMN)
    return columns


# ========================================
# Cells
# ========================================


def run_cell(base: ExperimentConfig, cell: dict, out_dir, latency: bool = False) -> dict:
    """
    Train and evaluate one grid cell; returns its report row.

    A seed cell also redraws the training and evaluation scenes.
    """
    overrides = dict(cell)
    if "seed" in cell:
        overrides.setdefault("scene_seed", cell["seed"])
    cfg = base.with_overrides(**overrides)
    cell_dir = Path(out_dir) / cell_label(cell)
    bind_context(cell=cell_label(cell), mode=cfg.gca.mode, variant=cfg.gca.variant, seed=cfg.seed)
    started = time.perf_counter()
    result = train(cfg, cell_dir)
    eval_set = SyntheticDataset(cfg.dataset, num_images=cfg.eval_images, offset=cfg.eval_offset)
    report = evaluate(result.model, eval_set)
    row: dict[str, Any] = {key: (list(v) if key == "pool_size" else v) for key, v in cell.items()}
    for column in METRIC_COLUMNS:
        row[column] = getattr(report, column)
    if latency:
        stats = measure_latency(
            result.model,
            eval_set[0].image,
            getattr(settings, "GCA_BENCH_WARMUP", 5),
            getattr(settings, "GCA_BENCH_RUNS", 50),
            labels={"cell": cell_label(cell)},
        )
        row[LATENCY_COLUMN] = stats["mean"] * 1000.0
    row["class_accuracy"] = report.class_accuracy
    row["head_parameters"] = report.parameter_counts["head"]
    row["checkpoint"] = str(result.checkpoint)
    row["seconds"] = round(time.perf_counter() - started, 3)
    logger.info("ablation_cell_complete", cell=cell_label(cell), ap=row["ap"], ap50=row["ap50"])
    return row


def _cell_payload(cell: dict) -> dict:
    return {key: (list(v) if key == "pool_size" else v) for key, v in cell.items()}


def ablate(
    base: ExperimentConfig,
    grid: Optional[dict] = None,
    out_dir=None,
    preset: Optional[str] = None,
    dispatch: bool = False,
) -> AblationReport:
    """
    Run every cell of a grid (or of a named preset) and collect the rows.

    Cells run in-process through the run_ablation_cell task unless dispatch
    is set, in which case they are queued to Celery workers. Rows always come
    back in grid order.

    Raises:
        ConfigError: for an unknown preset or an invalid grid key
    """
    from detection.tasks import run_ablation_cell

    latency = False
    name, title = "custom", "Custom grid"
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}; expected one of {', '.join(PRESETS)}")
        chosen = PRESETS[preset]
        base = base.with_overrides(**chosen.overrides)
        grid, latency, name, title = chosen.grid, chosen.latency, chosen.name, chosen.title
    grid = validate_grid(grid)
    out_dir = Path(out_dir or settings.GCA_OUTPUT_DIR) / name
    cells = expand_grid(grid)
    report = AblationReport(
        name=name,
        title=title,
        grid_keys=list(grid),
        columns=columns_for(grid, latency),
        base_config=base.to_dict(),
    )
    logger.info("ablation_started", name=name, cells=len(cells), dispatch=dispatch)
    started = time.perf_counter()
    args = [(base.to_dict(), _cell_payload(cell), str(out_dir), latency) for cell in cells]
    if dispatch:
        pending = [run_ablation_cell.delay(*a) for a in args]
        report.rows = [p.get() for p in pending]
    else:
        report.rows = [run_ablation_cell.apply(args=a).get() for a in args]
    report.seconds = round(time.perf_counter() - started, 3)
    logger.info("ablation_complete", name=name, cells=len(cells), seconds=report.seconds)
    return report
