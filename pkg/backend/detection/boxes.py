"""
Box geometry on numpy arrays of shape [R, 4] in (x1, y1, x2, y2) pixels.

Implements:
- IoU matrices, clipping and degenerate-box filtering
- the center/log-size delta parameterization (encode/decode)
- greedy NMS with stable tie-breaking by lower index
- anchor tiling over the pyramid levels
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# dw/dh are clamped here before exponentiation so a wild delta cannot blow up a box
MAX_LOG_SCALE = math.log(16.0)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)


def box_area(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix [len(a), len(b)]; zero-area pairs give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def clip_boxes(boxes: np.ndarray, image_size: Sequence[int]) -> np.ndarray:
    h, w = image_size
    clipped = boxes.copy()
    clipped[:, 0::2] = np.clip(clipped[:, 0::2], 0, w)
    clipped[:, 1::2] = np.clip(clipped[:, 1::2], 0, h)
    return clipped


def keep_valid(boxes: np.ndarray, min_size: float) -> np.ndarray:
    """Indices of boxes whose width and height are both at least min_size."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.nonzero((w >= min_size) & (h >= min_size))[0]


def encode(reference: np.ndarray, target: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) that move each reference box onto its target box."""
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return np.stack(
        [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * np.log(tw / rw), wh * np.log(th / rh)],
        axis=1,
    )


def decode(reference: np.ndarray, deltas: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """
    Apply deltas to reference boxes.

        cx' = cx + dx*w, cy' = cy + dy*h, w' = w*exp(dw), h' = h*exp(dh)

    with dw, dh clamped to at most log(16).
    """
    wx, wy, ww, wh = weights
    reference = reference.astype(np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    w = reference[:, 2] - reference[:, 0]
    h = reference[:, 3] - reference[:, 1]
    cx = reference[:, 0] + 0.5 * w
    cy = reference[:, 1] + 0.5 * h
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, MAX_LOG_SCALE)
    dh = np.minimum(deltas[:, 3] / wh, MAX_LOG_SCALE)
    pcx = cx + dx * w
    pcy = cy + dy * h
    pw = w * np.exp(dw)
    ph = h * np.exp(dh)
    return np.stack([pcx - 0.5 * pw, pcy - 0.5 * ph, pcx + 0.5 * pw, pcy + 0.5 * ph], axis=1)


def decode_boxes(anchors: "AnchorSet", deltas: np.ndarray, image_size=None) -> np.ndarray:
    """Decode deltas for every anchor of an AnchorSet, clipping when image_size is given."""
    boxes = decode(anchors.all_boxes(), deltas)
    return clip_boxes(boxes, image_size) if image_size is not None else boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """
    Greedy non-maximum suppression.

    Boxes are visited by descending score (equal scores by lower index); a
    box is dropped when its IoU with an already kept box exceeds the threshold.

    Returns:
        kept indices in selection order
    """
    scores = np.asarray(scores)
    if len(boxes) != len(scores):
        raise ValueError(f"nms got {len(boxes)} boxes and {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    if len(order) == 0:
        return order.astype(np.int64)
    iou = box_iou(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        kept.append(order[i])
        suppressed |= iou[i] > iou_threshold
    return np.asarray(kept, dtype=np.int64)


def batched_nms(boxes: np.ndarray, scores: np.ndarray, groups: np.ndarray, iou_threshold: float) -> np.ndarray:
    """NMS applied independently per group id; kept indices sorted by descending score."""
    kept = []
    for group in np.unique(groups):
        idx = np.nonzero(groups == group)[0]
        kept.append(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    if not kept:
        return np.zeros(0, dtype=np.int64)
    kept = np.concatenate(kept)
    return kept[np.argsort(-scores[kept], kind="stable")]


# ========================================
# Anchors
# ========================================


@dataclass
class AnchorLevel:
    stride: int
    size: float
    ratios: tuple
    height: int
    width: int
    # [A*H*W, 4], ordered (ratio, row, col) to match [A, H, W] logit maps
    boxes: np.ndarray

    @property
    def count(self) -> int:
        return len(self.boxes)


@dataclass
class AnchorSet:
    levels: list

    def all_boxes(self) -> np.ndarray:
        return np.concatenate([level.boxes for level in self.levels], axis=0)

    def counts(self) -> list[int]:
        return [level.count for level in self.levels]


def generate_anchors(feature_sizes, strides, sizes, ratios) -> AnchorSet:
    """
    Tile anchors over each level, centered on feature cells ((x + 0.5) * stride).

    A ratio r gives an anchor of area size^2 with height / width = r.
    """
    levels = []
    for (fh, fw), stride, size in zip(feature_sizes, strides, sizes):
        ratios = tuple(float(r) for r in ratios)
        ys = (np.arange(fh) + 0.5) * stride
        xs = (np.arange(fw) + 0.5) * stride
        per_ratio = []
        for r in ratios:
            w = size / math.sqrt(r)
            h = size * math.sqrt(r)
            cy, cx = np.meshgrid(ys, xs, indexing="ij")
            per_ratio.append(
                np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1).reshape(-1, 4)
            )
        levels.append(
            AnchorLevel(
                stride=int(stride),
                size=float(size),
                ratios=ratios,
                height=int(fh),
                width=int(fw),
                boxes=np.concatenate(per_ratio, axis=0),
            )
        )
    return AnchorSet(levels)
