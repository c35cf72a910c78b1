"""
Average-precision evaluation.

Detections are matched to ground truth greedily per image and class: by
descending score, each detection takes the unmatched ground-truth box with
the highest IoU at or above the threshold. AP is the area under the
all-point interpolated precision/recall curve, and mAP averages it over IoU
thresholds 0.50:0.05:0.95 and over classes that have ground truth.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import structlog

from detection.boxes import box_area, box_iou
from detection.exceptions import DatasetError

logger = structlog.get_logger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# desk-scale size buckets (areas in pixels^2)
SMALL_AREA = 16.0**2
MEDIUM_AREA = 48.0**2
AREA_RANGES = {
    "all": (0.0, np.inf),
    "small": (0.0, SMALL_AREA),
    "medium": (SMALL_AREA, MEDIUM_AREA),
    "large": (MEDIUM_AREA, np.inf),
}


@dataclass
class GroundTruth:
    boxes: np.ndarray
    labels: np.ndarray


@dataclass
class MetricsReport:
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0
    ap_per_threshold: dict = field(default_factory=dict)
    ap_per_class: dict = field(default_factory=dict)
    class_accuracy: dict = field(default_factory=dict)
    num_images: int = 0
    loss_curve: list = field(default_factory=list)
    parameter_counts: dict = field(default_factory=dict)
    latency_ms: Optional[float] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ========================================
# Matching and AP
# ========================================


def match_detections(
    det_boxes: np.ndarray,
    det_scores: np.ndarray,
    gt_boxes: np.ndarray,
    iou_threshold: float,
    gt_ignore: Optional[np.ndarray] = None,
    area_range: tuple = (0.0, np.inf),
) -> tuple[np.ndarray, np.ndarray]:
    """
    Greedy matching of one image's detections of a single class.

    Ignored ground truth (outside the area range) is only matched when no
    regular box qualifies; detections matched to it, or unmatched and outside
    the area range, are marked ignored.

    Returns:
        (true-positive flags, ignore flags), both in input detection order
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_ignore is None:
        gt_ignore = np.zeros(len(gt_boxes), dtype=bool)
    gt_ignore = np.asarray(gt_ignore, dtype=bool)
    tp = np.zeros(len(det_boxes), dtype=bool)
    ignored = np.zeros(len(det_boxes), dtype=bool)
    if len(det_boxes) == 0:
        return tp, ignored
    iou = box_iou(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in np.argsort(-np.asarray(det_scores), kind="stable"):
        available = ~taken & (iou[d] >= iou_threshold)
        regular = np.nonzero(available & ~gt_ignore)[0]
        fallback = np.nonzero(available & gt_ignore)[0]
        candidates = regular if len(regular) else fallback
        if len(candidates):
            best = candidates[np.argmax(iou[d, candidates])]
            taken[best] = True
            tp[d] = not gt_ignore[best]
            ignored[d] = bool(gt_ignore[best])
        else:
            area = box_area(det_boxes[d : d + 1])[0]
            ignored[d] = not area_range[0] <= area < area_range[1]
    return tp, ignored


def average_precision(scores: np.ndarray, tp: np.ndarray, num_gt: int) -> float:
    """
    All-point interpolated AP of a ranked detection list.

    Returns nan when the class has no ground truth.
    """
    if num_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[changes] - mrec[changes - 1]) * mpre[changes]))


def ap_table(
    predictions: Sequence,
    targets: Sequence[GroundTruth],
    num_classes: int,
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    area_range: tuple = (0.0, np.inf),
) -> np.ndarray:
    """AP matrix [thresholds, classes]; nan for classes without ground truth."""
    table = np.full((len(iou_thresholds), num_classes), np.nan)
    for t, thr in enumerate(iou_thresholds):
        for k in range(1, num_classes + 1):
            scores, hits = [], []
            num_gt = 0
            for det, gt in zip(predictions, targets):
                gt_mask = gt.labels == k
                gt_boxes = gt.boxes[gt_mask]
                areas = box_area(gt_boxes) if len(gt_boxes) else np.zeros(0)
                gt_ignore = (areas < area_range[0]) | (areas >= area_range[1])
                num_gt += int(np.count_nonzero(~gt_ignore))
                det_mask = det.labels == k
                tp, ignored = match_detections(
                    det.boxes[det_mask], det.scores[det_mask], gt_boxes, thr, gt_ignore, area_range
                )
                scores.append(det.scores[det_mask][~ignored])
                hits.append(tp[~ignored])
            table[t, k - 1] = average_precision(
                np.concatenate(scores) if scores else np.zeros(0),
                np.concatenate(hits) if hits else np.zeros(0, dtype=bool),
                num_gt,
            )
    return table


def _mean(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or np.all(np.isnan(values)):
        return 0.0
    return float(np.nanmean(values))


def class_accuracy(predictions: Sequence, targets: Sequence[GroundTruth], num_classes: int, iou: float = 0.5) -> dict:
    """
    Per class, the fraction of ground-truth objects whose best-overlapping
    detection (IoU >= iou, any label, ties broken by score) has the right label.
    """
    correct = np.zeros(num_classes)
    total = np.zeros(num_classes)
    for det, gt in zip(predictions, targets):
        overlaps = box_iou(gt.boxes, det.boxes) if len(det.boxes) else np.zeros((len(gt.boxes), 0))
        for g, label in enumerate(gt.labels):
            total[label - 1] += 1
            if overlaps.shape[1] == 0:
                continue
            candidates = np.nonzero(overlaps[g] >= iou)[0]
            if len(candidates) == 0:
                continue
            best = candidates[np.lexsort((-det.scores[candidates], -overlaps[g, candidates]))[0]]
            correct[label - 1] += det.labels[best] == label
    return {
        int(k + 1): (float(correct[k] / total[k]) if total[k] else None) for k in range(num_classes)
    }


def evaluate_detections(
    predictions: Sequence,
    targets: Sequence[GroundTruth],
    num_classes: int,
    category_names: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """
    Build a MetricsReport from per-image detections and ground truth.

    Raises:
        DatasetError: if there are no images
    """
    if len(targets) == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    names = list(category_names) if category_names else [str(k) for k in range(1, num_classes + 1)]
    table = ap_table(predictions, targets, num_classes)
    per_threshold = {f"{thr:.2f}": _mean(table[t]) for t, thr in enumerate(IOU_THRESHOLDS)}
    buckets = {
        name: _mean(ap_table(predictions, targets, num_classes, area_range=AREA_RANGES[name]))
        for name in ("small", "medium", "large")
    }
    return MetricsReport(
        ap=_mean(table),
        ap50=per_threshold["0.50"],
        ap75=per_threshold["0.75"],
        ap_small=buckets["small"],
        ap_medium=buckets["medium"],
        ap_large=buckets["large"],
        ap_per_threshold=per_threshold,
        ap_per_class={names[k]: _mean(table[:, k]) for k in range(num_classes)},
        class_accuracy={names[k - 1]: v for k, v in class_accuracy(predictions, targets, num_classes).items()},
        num_images=len(targets),
    )


def evaluate(model, dataset) -> MetricsReport:
    """
    Run inference over a dataset and score it.

    Raises:
        DatasetError: if the dataset is empty
    """
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    predictions, targets = [], []
    for scene in dataset:
        predictions.append(model.detect(scene.image))
        targets.append(GroundTruth(scene.boxes, scene.labels))
    report = evaluate_detections(
        predictions, targets, model.cfg.gca.num_classes, getattr(dataset, "category_names", None)
    )
    report.parameter_counts = {
        "total": model.num_parameters(),
        "head": model.head.num_parameters(),
    }
    logger.info("evaluation_complete", images=len(targets), ap=report.ap, ap50=report.ap50, ap75=report.ap75)
    return report
