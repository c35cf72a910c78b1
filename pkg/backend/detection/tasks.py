"""
Celery tasks for experiment cells.
"""

from typing import Any

import structlog
from celery import shared_task

from detection.experiment import ExperimentConfig

logger = structlog.get_logger(__name__)


def log_cell_failure(task, exc, task_id, args, kwargs, einfo):
    """Error handler for cells that raised; the exception still reaches the caller."""
    logger.error(
        "ablation_cell_failed",
        task=task.name,
        task_id=task_id,
        exception=str(exc),
        cell=args[1] if len(args) > 1 else kwargs.get("cell"),
    )


@shared_task(bind=True, acks_late=True, reject_on_worker_lost=True, on_failure=log_cell_failure)
def run_ablation_cell(self, config: dict, cell: dict, out_dir: str, latency: bool = False) -> dict[str, Any]:
    """
    Train and evaluate one ablation cell.

    Args:
        config: base ExperimentConfig as a plain dict
        cell: grid values for this cell (pool_size as a two-item list)
        out_dir: directory under which the cell writes its run artifacts
        latency: also measure detect() latency of the trained model

    Returns:
        The cell's report row
    """
    from detection.ablation import run_cell

    base = ExperimentConfig.from_dict(config)
    logger.info("ablation_cell_started", task_id=self.request.id, cell=cell)
    return run_cell(base, cell, out_dir, latency)
