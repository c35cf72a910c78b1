"""
Training loop: SGD with momentum and a step schedule, one image per step.

Each iteration renders (or reads) one scene, flips it horizontally with
probability flip_probability, and minimizes rpn_loss + head_loss. Every
iteration's losses go to the structured log and to <out>/train_log.jsonl.
Checkpoints are written at every schedule boundary and at the end, together
with <out>/metrics.prom (iteration timings and the last loss gauge).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from config.observability import bind_context, metrics, timed, write_prometheus
from detection.checkpoint import save_checkpoint
from detection.exceptions import NonFiniteLossError
from detection.experiment import ExperimentConfig, OptimizerConfig, save_config
from detection.model import GcaRcnn, build_model
from detection.optim import SGD
from detection.synthetic import SyntheticDataset, flip_scene, require_non_empty

logger = structlog.get_logger(__name__)

LOG_FILE = "train_log.jsonl"
FINAL_CHECKPOINT = "checkpoint_final.gcac"
DUMP_FILE = "nonfinite_dump.json"
ITERATION_METRIC = "train_iteration_seconds"


@dataclass
class TrainResult:
    model: GcaRcnn
    checkpoint: Path
    log_path: Path
    losses: list = field(default_factory=list)
    boundary_checkpoints: list = field(default_factory=list)
    seconds: float = 0.0


def learning_rate(optimizer: OptimizerConfig, epoch: int) -> float:
    """Base lr multiplied by lr_gamma once for every step epoch already reached."""
    drops = sum(1 for step in optimizer.lr_steps if epoch >= step)
    return optimizer.lr * optimizer.lr_gamma**drops


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; the first entries average over what exists so far."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values
    sums = np.cumsum(values)
    out = np.empty_like(values)
    for i in range(len(values)):
        start = max(0, i - window + 1)
        out[i] = (sums[i] - (sums[start - 1] if start else 0.0)) / (i - start + 1)
    return out


def grad_norms(model: GcaRcnn) -> dict[str, float]:
    return {
        path: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
        for path, p in model.named_parameters()
    }


def _dump_non_finite(out_dir: Path, iteration: int, model: GcaRcnn, losses: dict) -> NonFiniteLossError:
    norms = grad_norms(model)
    dump = {"iteration": iteration, "losses": losses, "grad_norms": norms}
    (out_dir / DUMP_FILE).write_text(json.dumps(dump, indent=2, default=str), encoding="utf-8")
    logger.error("non_finite_loss", iteration=iteration, dump=str(out_dir / DUMP_FILE), **losses)
    return NonFiniteLossError(f"non-finite loss at iteration {iteration}", iteration, norms)


@timed(ITERATION_METRIC)
def train_step(model: GcaRcnn, optimizer: SGD, scene, rng: np.random.Generator, out_dir: Path, iteration: int):
    """One SGD update on one scene; returns the loss breakdown and its float values."""
    optimizer.zero_grad()
    breakdown = model.losses(scene.image, scene.boxes, scene.labels, rng)
    losses = breakdown.as_dict()
    if not all(math.isfinite(v) for v in losses.values()):
        raise _dump_non_finite(out_dir, iteration, model, losses)
    if breakdown.total.requires_grad:
        breakdown.total.backward()
    optimizer.step()
    return breakdown, losses


def train(
    cfg: ExperimentConfig,
    out_dir,
    dataset=None,
    model: Optional[GcaRcnn] = None,
) -> TrainResult:
    """
    Train a detector from scratch (or continue `model`).

    Determinism: initialization, scene order, flips and RoI/anchor sampling
    all derive from cfg.seed, so one config produces one checkpoint.

    Raises:
        NonFiniteLossError: when any loss becomes NaN or infinite; the
            diagnostic dump is written to <out>/nonfinite_dump.json first
        DatasetError: for an empty dataset
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else SyntheticDataset(cfg.dataset)
    require_non_empty(dataset)
    model = model if model is not None else build_model(cfg)
    save_config(cfg, out_dir / "config.json")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    optimizer = SGD(model.parameters(), cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay)
    bind_context(mode=cfg.gca.mode, variant=cfg.gca.variant, seed=cfg.seed)

    log_path = out_dir / LOG_FILE
    result = TrainResult(model=model, checkpoint=out_dir / FINAL_CHECKPOINT, log_path=log_path)
    started = time.perf_counter()
    iteration = 0
    with open(log_path, "w", encoding="utf-8") as log_file:
        for epoch in range(cfg.epochs):
            optimizer.lr = learning_rate(cfg.optimizer, epoch)
            order = rng.permutation(len(dataset))
            for i in order:
                scene = dataset[int(i)]
                if rng.random() < cfg.flip_probability:
                    scene = flip_scene(scene)
                breakdown, losses = train_step(model, optimizer, scene, rng, out_dir, iteration)

                record = {"iteration": iteration, "epoch": epoch, "lr": optimizer.lr, **losses}
                log_file.write(json.dumps(record) + "\n")
                result.losses.append(losses["total_loss"])
                metrics.set_gauge("train_total_loss", losses["total_loss"])
                if cfg.log_every and iteration % cfg.log_every == 0:
                    logger.info(
                        "train_iteration",
                        iteration=iteration,
                        epoch=epoch,
                        lr=optimizer.lr,
                        rois=breakdown.num_rois,
                        foreground=breakdown.num_foreground,
                        **losses,
                    )
                iteration += 1

            window = result.losses[-len(dataset) :]
            logger.info("epoch_complete", epoch=epoch, mean_loss=float(np.mean(window)), lr=optimizer.lr)
            if epoch + 1 in cfg.optimizer.lr_steps and epoch + 1 < cfg.epochs:
                path = save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:03d}.gcac", model, cfg, iteration)
                result.boundary_checkpoints.append(path)

    save_checkpoint(result.checkpoint, model, cfg, iteration)
    write_prometheus(out_dir)
    result.seconds = time.perf_counter() - started
    logger.info(
        "training_complete",
        iterations=iteration,
        seconds=round(result.seconds, 2),
        final_loss=float(smoothed(result.losses)[-1]) if result.losses else None,
    )
    return result
