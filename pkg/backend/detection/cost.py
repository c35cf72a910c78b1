"""
Model cost accounting: parameter census, multiply-accumulates and latency.

Latency is the wall-clock time of a whole detect() call on one fixed input,
averaged over GCA_BENCH_RUNS runs after GCA_BENCH_WARMUP warmups.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import structlog
from django.conf import settings

from config.observability import metrics, timed
from detection import ops
from detection.experiment import ExperimentConfig
from detection.model import build_model
from detection.synthetic import generate_scene

logger = structlog.get_logger(__name__)

COST_MODES = ("baseline", "full", "lightweight")
LATENCY_METRIC = "detect_latency_seconds"


@dataclass
class ModeCost:
    mode: str
    head_parameters: int
    total_parameters: int
    macs: int
    latency_ms: float
    latency_std_ms: float
    runs: int


@dataclass
class CostReport:
    image_size: tuple
    rows: list = field(default_factory=list)

    def row(self, mode: str) -> ModeCost:
        for r in self.rows:
            if r.mode == mode:
                return r
        raise KeyError(mode)

    def to_dict(self) -> dict:
        return {"image_size": list(self.image_size), "rows": [dataclasses.asdict(r) for r in self.rows]}


def baseline_head_parameters(fc_dim: int, num_classes: int, roi_size: int = 7, channels: int = 256) -> int:
    """Closed form for the two-FC head: fc6 + fc7 + classifier + class-specific regressor."""
    flat = channels * roi_size * roi_size
    return (
        flat * fc_dim + fc_dim
        + fc_dim * fc_dim + fc_dim
        + fc_dim * (num_classes + 1) + (num_classes + 1)
        + fc_dim * 4 * num_classes + 4 * num_classes
    )


def measure_latency(model, image: np.ndarray, warmup: int, runs: int, labels: Optional[dict] = None) -> dict:
    metrics.reset(LATENCY_METRIC, labels)
    for _ in range(warmup):
        model.detect(image)
    detect = timed(LATENCY_METRIC, labels)(model.detect)
    for _ in range(runs):
        detect(image)
    return metrics.summary(LATENCY_METRIC, labels)


def cost_report(
    cfg: ExperimentConfig,
    modes: Sequence[str] = COST_MODES,
    warmup: Optional[int] = None,
    runs: Optional[int] = None,
) -> CostReport:
    """
    Compare heads on one identical input image.

    Each mode reuses cfg with only gca.mode changed, so backbone, FPN and
    RPN are the same size in every row.
    """
    warmup = warmup if warmup is not None else getattr(settings, "GCA_BENCH_WARMUP", 5)
    runs = runs if runs is not None else getattr(settings, "GCA_BENCH_RUNS", 50)
    image = generate_scene(cfg.dataset, 0).image
    report = CostReport(image_size=tuple(image.shape[1:]))
    for mode in modes:
        mode_cfg = cfg.with_overrides(mode=mode)
        model = build_model(mode_cfg)
        with ops.count_macs() as macs:
            model.detect(image)
        stats = measure_latency(model, image, warmup, runs, labels={"mode": mode})
        row = ModeCost(
            mode=mode,
            head_parameters=model.head.num_parameters(),
            total_parameters=model.num_parameters(),
            macs=int(macs[0]),
            latency_ms=stats["mean"] * 1000.0,
            latency_std_ms=stats["std"] * 1000.0,
            runs=stats["count"],
        )
        report.rows.append(row)
        logger.info("cost_measured", **dataclasses.asdict(row))
    return report
