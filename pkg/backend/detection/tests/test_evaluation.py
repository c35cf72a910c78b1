"""
Tests for matching, average precision and class accuracy.
"""

import math

import numpy as np
import pytest

from detection.evaluation import (
    IOU_THRESHOLDS,
    GroundTruth,
    average_precision,
    class_accuracy,
    evaluate,
    evaluate_detections,
    match_detections,
)
from detection.exceptions import DatasetError
from detection.model import Detections, build_model
from detection.synthetic import SyntheticDataset


def iou_pair(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_map(predictions, targets, num_classes):
    """Greedy matching with plain loops and a quadratic interpolated-precision scan."""
    aps = []
    for thr in IOU_THRESHOLDS:
        for k in range(1, num_classes + 1):
            ranked = []
            num_gt = 0
            for det, gt in zip(predictions, targets):
                gts = [g for g, label in zip(gt.boxes, gt.labels) if label == k]
                num_gt += len(gts)
                dets = sorted(
                    [(s, b) for b, s, label in zip(det.boxes, det.scores, det.labels) if label == k],
                    key=lambda item: -item[0],
                )
                taken = [False] * len(gts)
                for score, box in dets:
                    best, best_iou = None, thr
                    for g, gbox in enumerate(gts):
                        overlap = iou_pair(box, gbox)
                        if not taken[g] and overlap >= best_iou:
                            if best is None or overlap > best_iou:
                                best, best_iou = g, overlap
                    if best is not None:
                        taken[best] = True
                    ranked.append((score, best is not None))
            if num_gt == 0:
                continue
            ranked.sort(key=lambda item: -item[0])
            precisions = []
            hits = 0
            for i, (_, hit) in enumerate(ranked):
                hits += hit
                precisions.append(hits / (i + 1))
            ap = 0.0
            for i, (_, hit) in enumerate(ranked):
                if hit:
                    ap += max(precisions[i:]) / num_gt
            aps.append(ap)
    return sum(aps) / len(aps) if aps else 0.0


def random_scene(rng, num_classes=3):
    count = rng.integers(1, 5)
    xy = rng.uniform(0, 80, (count, 2))
    wh = rng.uniform(10, 40, (count, 2))
    gt_boxes = np.concatenate([xy, xy + wh], axis=1)
    gt_labels = rng.integers(1, num_classes + 1, count)
    jittered = gt_boxes + rng.normal(0, 3, gt_boxes.shape)
    keep = rng.uniform(size=count) < 0.8
    false_xy = rng.uniform(0, 80, (3, 2))
    false_boxes = np.concatenate([false_xy, false_xy + rng.uniform(10, 40, (3, 2))], axis=1)
    boxes = np.concatenate([jittered[keep], false_boxes])
    labels = np.concatenate([gt_labels[keep], rng.integers(1, num_classes + 1, 3)])
    # an occasional wrong label on a well-placed box
    flip = rng.uniform(size=len(labels)) < 0.1
    labels[flip] = labels[flip] % num_classes + 1
    scores = rng.uniform(0, 1, len(boxes))
    return Detections(boxes, scores, labels), GroundTruth(gt_boxes, gt_labels)


class TestMatching:
    def test_highest_iou_wins(self):
        """Test that a detection takes the best-overlapping free gt box."""
        gt = np.array([[0, 0, 10, 10], [2, 0, 12, 10]], dtype=float)
        tp, _ = match_detections(np.array([[2, 0, 12, 10]], dtype=float), np.array([0.9]), gt, 0.5)
        assert tp.tolist() == [True]

    def test_duplicate_is_false_positive(self):
        """Test that a second hit on the same gt does not count."""
        gt = np.array([[0, 0, 10, 10]], dtype=float)
        dets = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
        tp, _ = match_detections(dets, np.array([0.5, 0.9]), gt, 0.5)
        assert tp.tolist() == [False, True]

    def test_ignored_gt_marks_detection_ignored(self):
        """Test that matching an out-of-range gt box removes the detection from AP."""
        gt = np.array([[0, 0, 4, 4]], dtype=float)
        tp, ignored = match_detections(gt, np.array([1.0]), gt, 0.5, gt_ignore=np.array([True]), area_range=(256.0, np.inf))
        assert tp.tolist() == [False] and ignored.tolist() == [True]


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision(np.array([0.9, 0.8]), np.array([True, True]), 2) == pytest.approx(1.0)

    def test_no_detections(self):
        assert average_precision(np.zeros(0), np.zeros(0, dtype=bool), 3) == 0.0

    def test_no_ground_truth_is_nan(self):
        assert math.isnan(average_precision(np.array([0.5]), np.array([False]), 0))

    def test_interpolation_example(self):
        """Test TP, FP, TP over two gt boxes: 0.5 * 1 + 0.5 * 2/3."""
        ap = average_precision(np.array([0.9, 0.8, 0.7]), np.array([True, False, True]), 2)
        assert ap == pytest.approx(0.5 + 0.5 * 2 / 3)


class TestEvaluateDetections:
    """Report-level metrics."""

    def test_perfect_detections(self):
        """Test that detections equal to ground truth give AP 1 everywhere."""
        gt = GroundTruth(np.array([[0, 0, 30, 30], [40, 40, 100, 100]], dtype=float), np.array([1, 2]))
        det = Detections(gt.boxes.copy(), np.array([0.9, 0.8]), gt.labels.copy())
        report = evaluate_detections([det], [gt], 2)
        assert report.ap == pytest.approx(1.0)
        assert report.ap50 == pytest.approx(1.0)
        assert report.ap_medium == pytest.approx(1.0)
        assert report.ap_large == pytest.approx(1.0)
        # no small objects at all
        assert report.ap_small == 0.0
        assert report.class_accuracy == {"1": 1.0, "2": 1.0}

    def test_no_detections(self):
        """Test that an empty prediction set gives AP 0."""
        gt = GroundTruth(np.array([[0, 0, 30, 30]], dtype=float), np.array([1]))
        report = evaluate_detections([Detections.empty()], [gt], 1)
        assert report.ap == 0.0
        assert report.class_accuracy == {"1": 0.0}

    def test_matches_brute_force_oracle(self):
        """Test 20 random scenes against the loop-based oracle within 1e-9."""
        rng = np.random.default_rng(2024)
        scenes = [random_scene(rng) for _ in range(20)]
        predictions = [s[0] for s in scenes]
        targets = [s[1] for s in scenes]
        report = evaluate_detections(predictions, targets, 3)
        assert report.ap == pytest.approx(brute_force_map(predictions, targets, 3), abs=1e-9)

    def test_empty_dataset(self):
        with pytest.raises(DatasetError):
            evaluate_detections([], [], 3)


class TestClassAccuracy:
    def test_best_overlap_decides(self):
        """Test that the highest-IoU detection's label is what counts."""
        gt = GroundTruth(np.array([[0, 0, 10, 10]], dtype=float), np.array([2]))
        det = Detections(
            np.array([[0, 0, 10, 10], [1, 1, 10, 10]], dtype=float),
            np.array([0.2, 0.9]),
            np.array([2, 1]),
        )
        assert class_accuracy([det], [gt], 2) == {1: None, 2: 1.0}

    def test_label_swap(self):
        gt = GroundTruth(np.array([[0, 0, 10, 10]], dtype=float), np.array([1]))
        det = Detections(gt.boxes.copy(), np.array([0.9]), np.array([2]))
        assert class_accuracy([det], [gt], 2)[1] == 0.0


class TestEvaluateModel:
    def test_report_carries_parameter_counts(self, tiny_config):
        """Test evaluate() on an untrained model over two scenes."""
        model = build_model(tiny_config)
        report = evaluate(model, SyntheticDataset(tiny_config.dataset, num_images=2))
        assert report.num_images == 2
        assert report.parameter_counts["head"] == model.head.num_parameters()
        assert 0.0 <= report.ap <= 1.0
