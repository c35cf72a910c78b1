"""
Finite-difference verification of the differentiation engine.

This module provides:
- numeric_gradient: central differences on one float64 array
- the "ops" suite: every differentiable operation on small random inputs
- the "end_to_end" suite: the whole detector loss on a 64x64 single-object
  scene for every head mode and every attention variant

Each site (an op input or a model parameter) is scored by its worst element
under |analytic - numeric| / max(1, |numeric|), and the entry records which
flat index that was. Failures are report entries, never exceptions.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import structlog
from django.conf import settings

from detection import ops
from detection.exceptions import ConfigError
from detection.experiment import (
    MODES,
    VARIANTS,
    BackboneConfig,
    ExperimentConfig,
    GcaConfig,
    SceneSpec,
)
from detection.model import build_model
from detection.roi_align import roi_align
from detection.synthetic import generate_scene
from detection.tensor import Tensor, default_dtype

logger = structlog.get_logger(__name__)

EPSILON = 1e-5
# random elements checked per parameter tensor, on top of the largest-gradient one
ELEMENTS_PER_SITE = 4
# relu inputs are kept at least this far from the kink
KINK_MARGIN = 1e-3


@dataclass
class GradCheckEntry:
    site: str
    max_rel_error: float
    elements: int
    passed: bool
    worst_element: int = -1


@dataclass
class GradCheckReport:
    scope: str
    tolerance: float
    entries: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "seconds": self.seconds,
            "entries": [dataclasses.asdict(e) for e in self.entries],
        }


def elementwise_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def worst_element(analytic: np.ndarray, numeric: np.ndarray) -> tuple[int, float]:
    """Position and error of the element that disagrees most; (-1, 0.0) when empty."""
    errors = elementwise_error(analytic, numeric)
    if errors.size == 0:
        return -1, 0.0
    k = int(np.argmax(errors))
    return k, float(errors[k])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return worst_element(analytic, numeric)[1]


def numeric_gradient(
    loss: Callable[[], float],
    array: np.ndarray,
    indices: Optional[Sequence[int]] = None,
    eps: float = EPSILON,
) -> np.ndarray:
    """
    Central differences of loss() w.r.t. the given flat indices of array.

    array is perturbed in place and restored.
    """
    flat = array.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    grads = []
    for i in indices:
        original = flat[i]
        flat[i] = original + eps
        plus = loss()
        flat[i] = original - eps
        minus = loss()
        flat[i] = original
        grads.append((plus - minus) / (2 * eps))
    return np.asarray(grads, dtype=np.float64)


# ========================================
# Operation suite
# ========================================


@dataclass
class OpCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: list


def _away_from_zero(x: np.ndarray, margin: float = KINK_MARGIN) -> np.ndarray:
    return np.where(x >= 0, np.maximum(x, margin), np.minimum(x, -margin))


def op_cases(rng: np.random.Generator) -> list[OpCase]:
    """Small float64 inputs for every differentiable operation."""
    r = rng.standard_normal
    boxes = np.array([[1.0, 2.0, 9.5, 11.0], [0.0, 0.0, 15.0, 15.0], [4.2, 3.3, 6.1, 12.7]])
    return [
        OpCase("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1), [r((2, 3, 5, 5)), r((4, 3, 3, 3)), r(4)]),
        OpCase("conv2d_stride2", lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1), [r((1, 2, 6, 6)), r((3, 2, 3, 3)), r(3)]),
        OpCase("conv2d_1x1", lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=0), [r((1, 4, 3, 3)), r((2, 4, 1, 1)), r(2)]),
        OpCase("linear", ops.linear, [r((3, 5)), r((4, 5)), r(4)]),
        OpCase("relu", ops.relu, [_away_from_zero(r((3, 4)))]),
        OpCase("sigmoid", ops.sigmoid, [r((3, 4))]),
        OpCase("adaptive_avg_pool", lambda x: ops.adaptive_avg_pool(x, 3, 2), [r((1, 2, 7, 5))]),
        OpCase("global_avg_pool", ops.global_avg_pool, [r((2, 3, 4, 4))]),
        OpCase("upsample_nearest2x", ops.upsample_nearest2x, [r((1, 2, 3, 3))]),
        OpCase("concat", lambda a, b: ops.concat([a, b], axis=0), [r((2, 3)), r((1, 3))]),
        OpCase("concat_channels", lambda a, b: ops.concat_channels([a, b]), [r((1, 2, 3, 3)), r((1, 3, 3, 3))]),
        OpCase("flatten", ops.flatten, [r((2, 3, 2, 2))]),
        OpCase("take_flat", lambda x: ops.take_flat(x, np.array([[0, 5], [5, 7]])), [r((2, 4))]),
        OpCase("take_rows", lambda x: ops.take_rows(x, np.array([2, 0, 2])), [r((3, 4))]),
        OpCase("add", ops.add, [r((2, 3)), r((2, 3))]),
        OpCase("mul", ops.mul, [r((2, 3)), r((2, 3))]),
        OpCase("scale", lambda x: ops.scale(x, -1.7), [r((2, 3))]),
        OpCase("channel_scale", ops.channel_scale, [r((2, 3, 2, 2)), r((2, 3))]),
        OpCase("channel_scale_2d", ops.channel_scale, [r((2, 5)), r((2, 5))]),
        OpCase("sum_all", ops.sum_all, [r((2, 3))]),
        OpCase(
            "binary_cross_entropy",
            lambda x: ops.binary_cross_entropy_with_logits(x, np.array([1.0, 0.0, 1.0, 0.0])),
            [r(4)],
        ),
        OpCase("softmax_cross_entropy", lambda x: ops.softmax_cross_entropy(x, np.array([0, 3, 1])), [r((3, 4))]),
        # targets chosen so every difference stays clear of the |d| = 1 kink
        OpCase("smooth_l1", lambda x: ops.smooth_l1(x, np.zeros((2, 4))), [rng.choice([-1, 1], (2, 4)) * rng.uniform(0.1, 0.8, (2, 4)) + rng.choice([0, 2.5], (2, 4))]),
        OpCase("roi_align", lambda f: roi_align(f, boxes, stride=1.0, output_size=3, sampling_ratio=2), [r((1, 2, 16, 16))]),
    ]


def check_op(case: OpCase, tolerance: float, rng: np.random.Generator) -> list[GradCheckEntry]:
    """Compare analytic and numeric gradients of sum(out * projection) for every input."""
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True, dtype=np.float64) for x in case.inputs]
    out = case.fn(*tensors)
    projection = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(case.fn(*tensors).data * projection))

    seeded = ops.sum_all(ops.mul(out, Tensor(projection, dtype=np.float64)))
    seeded.backward()
    entries = []
    for k, t in enumerate(tensors):
        numeric = numeric_gradient(loss, t.data)
        worst, err = worst_element(t.grad, numeric)
        entries.append(GradCheckEntry(f"{case.name}[{k}]", err, t.size, err < tolerance, worst))
    return entries


def run_op_suite(tolerance: Optional[float] = None, seed: int = 0) -> GradCheckReport:
    tolerance = tolerance if tolerance is not None else getattr(settings, "GCA_GRADCHECK_TOLERANCE", 1e-4)
    rng = np.random.default_rng(seed)
    report = GradCheckReport("ops", tolerance)
    started = time.perf_counter()
    with default_dtype(np.float64):
        for case in op_cases(rng):
            report.entries.extend(check_op(case, tolerance, rng))
    report.seconds = time.perf_counter() - started
    return report


# ========================================
# End-to-end suite
# ========================================


def gradcheck_config(mode: str = "full", variant: str = "conv", seed: int = 0) -> ExperimentConfig:
    """A narrow detector on 64x64 single-object scenes."""
    return ExperimentConfig(
        backbone=BackboneConfig(widths=(4, 8, 8, 8)),
        gca=GcaConfig(mode=mode, variant=variant, fc_dim=16, fusion_dim=8, num_classes=3),
        dataset=SceneSpec(image_size=(64, 64), objects_per_image=1, num_classes=3, seed=seed, num_images=1),
        seed=seed,
    )


def fixed_proposals(gt_boxes: np.ndarray, rng: np.random.Generator, count: int = 6) -> np.ndarray:
    """Jittered copies of the gt box plus random boxes, so fg and bg RoIs both exist."""
    gt = gt_boxes[0]
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    jitter = rng.uniform(-0.15, 0.15, size=(count // 2, 4)) * np.array([w, h, w, h])
    near = gt[None, :] + jitter
    xy = rng.uniform(0, 40, size=(count - count // 2, 2))
    wh = rng.uniform(8, 24, size=(count - count // 2, 2))
    far = np.concatenate([xy, xy + wh], axis=1)
    return np.clip(np.concatenate([near, far], axis=0), 0, 64)


def pick_elements(analytic: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """The largest-|gradient| flat index followed by up to count distinct random others."""
    top = int(np.argmax(np.abs(analytic)))
    rest = np.delete(np.arange(analytic.size), top)
    extra = rng.choice(rest, size=min(count, rest.size), replace=False)
    return np.concatenate([[top], np.sort(extra)]).astype(np.int64)


def check_end_to_end(
    mode: str,
    variant: str,
    tolerance: float,
    seed: int = 0,
    elements_per_site: int = ELEMENTS_PER_SITE,
) -> list[GradCheckEntry]:
    """
    Gradient check of the total loss w.r.t. every parameter tensor.

    Proposals and the sampling stream are fixed so each evaluation sees the
    same discrete choices. Per parameter the element with the largest
    analytic gradient is checked together with elements_per_site random ones.
    """
    cfg = gradcheck_config(mode, variant, seed)
    picker = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    scene = generate_scene(cfg.dataset, 0)
    with default_dtype(np.float64):
        model = build_model(cfg)
        proposals = fixed_proposals(scene.boxes, np.random.default_rng(seed))

        def forward():
            rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
            return model.losses(scene.image.astype(np.float64), scene.boxes, scene.labels, rng, proposals=proposals)

        model.zero_grad()
        forward().total.backward()
        entries = []
        for path, param in model.named_parameters():
            analytic = param.grad.reshape(-1)
            picked = pick_elements(analytic, elements_per_site, picker)
            numeric = numeric_gradient(lambda: forward().total.item(), param.data, picked)
            k, err = worst_element(analytic[picked], numeric)
            entries.append(
                GradCheckEntry(f"{mode}/{variant}:{path}", err, len(picked), err < tolerance, int(picked[k]))
            )
    return entries


def end_to_end_grid() -> list[tuple[str, str]]:
    """Every head mode once (variant conv) plus every remaining variant in full mode."""
    grid = [(mode, "conv") for mode in MODES]
    grid += [("full", variant) for variant in VARIANTS if variant != "conv"]
    return grid


def run_end_to_end_suite(
    tolerance: Optional[float] = None,
    seed: int = 0,
    grid: Optional[Sequence[tuple[str, str]]] = None,
    elements_per_site: int = ELEMENTS_PER_SITE,
) -> GradCheckReport:
    tolerance = tolerance if tolerance is not None else getattr(settings, "GCA_GRADCHECK_TOLERANCE", 1e-4)
    report = GradCheckReport("end_to_end", tolerance)
    started = time.perf_counter()
    for mode, variant in grid or end_to_end_grid():
        entries = check_end_to_end(mode, variant, tolerance, seed, elements_per_site)
        report.entries.extend(entries)
        logger.info(
            "gradcheck_cell_complete",
            mode=mode,
            variant=variant,
            sites=len(entries),
            max_rel_error=max(e.max_rel_error for e in entries),
        )
    report.seconds = time.perf_counter() - started
    return report


def grad_check_suite(scope: str, tolerance: Optional[float] = None, seed: int = 0) -> GradCheckReport:
    """Run the "ops" or "end_to_end" suite."""
    if scope == "ops":
        return run_op_suite(tolerance, seed)
    if scope == "end_to_end":
        return run_end_to_end_suite(tolerance, seed)
    raise ConfigError(f"Unknown gradcheck scope {scope!r}; use 'ops' or 'end_to_end'")
