"""
Region Proposal Network with optional global feature recalibration.

The head is shared across pyramid levels: an optional recalibration layer
(global average pool -> 256->256 layer -> sigmoid gate -> channel-wise
product), a 3x3 conv + ReLU, then sibling 1x1 convs for objectness logits
and box deltas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import structlog

from detection import ops
from detection.boxes import AnchorSet, box_iou, clip_boxes, decode, encode, keep_valid, nms
from detection.exceptions import ConfigError, ShapeError
from detection.experiment import FPN_CHANNELS, RpnConfig
from detection.nn import Conv2d, Linear, Module
from detection.tensor import Tensor

logger = structlog.get_logger(__name__)


@dataclass
class RpnLevelOutput:
    # [N, A, Hk, Wk]
    logits: Tensor
    # [N, 4A, Hk, Wk]; channel 4a + k holds coordinate k of ratio a
    deltas: Tensor


@dataclass(frozen=True)
class Proposal:
    box: tuple
    objectness: float


@dataclass
class Proposals:
    """Proposals of one image, sorted by descending objectness."""

    boxes: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    def as_list(self) -> list[Proposal]:
        return [Proposal(tuple(float(v) for v in b), float(s)) for b, s in zip(self.boxes, self.scores)]


# ========================================
# Recalibration
# ========================================


class FeatureRecalibration(Module):
    """Channel recalibration from global statistics, shared by every level."""

    def __init__(self, layer: str = "fc", gate: bool = True, channels: int = FPN_CHANNELS):
        if layer not in ("fc", "conv1x1"):
            raise ConfigError(f"Unknown recalibration layer {layer!r}")
        self.layer = layer
        self.gate = gate
        self.channels = channels
        if layer == "fc":
            self.fc = Linear(channels, channels)
        else:
            self.conv = Conv2d(channels, channels, 1)

    def forward(self, p: Tensor) -> Tensor:
        return recalibrate_level(self, p)


def recalibrate_level(recal: FeatureRecalibration, p: Tensor) -> Tensor:
    """
    Scale every channel of p by a gate computed from p's global statistics.

    Raises:
        ShapeError: if p does not have the expected channel count
    """
    if p.ndim != 4 or p.shape[1] != recal.channels:
        raise ShapeError(f"recalibration expects {recal.channels} channels, got {p.shape}")
    z = ops.global_avg_pool(p)
    if recal.layer == "fc":
        y = recal.fc(z)
    else:
        n, c = z.shape
        y = ops.reshape(recal.conv(ops.reshape(z, (n, c, 1, 1))), (n, c))
    s = ops.sigmoid(y) if recal.gate else y
    return ops.channel_scale(p, s)


# ========================================
# Head
# ========================================


class RpnHead(Module):
    def __init__(self, cfg: RpnConfig, recalibrate: bool = False, recal_layer: str = "fc", channels: int = FPN_CHANNELS):
        self.num_anchors = len(cfg.aspect_ratios)
        self.recalibration = (
            FeatureRecalibration(recal_layer, gate=cfg.recal_gate, channels=channels) if recalibrate else None
        )
        self.conv = Conv2d(channels, channels, 3)
        self.cls_logits = Conv2d(channels, self.num_anchors, 1)
        self.bbox_pred = Conv2d(channels, 4 * self.num_anchors, 1)

    def forward(self, pyramid, recalibrate: Optional[bool] = None) -> list[RpnLevelOutput]:
        if recalibrate is None:
            recalibrate = self.recalibration is not None
        return rpn_forward(self, pyramid, recalibrate)


def rpn_forward(head: RpnHead, pyramid, recalibrate: bool) -> list[RpnLevelOutput]:
    """Per-level objectness logits and deltas; recalibration runs before the shared conv."""
    if recalibrate and head.recalibration is None:
        raise ConfigError("This RPN head was built without recalibration layers")
    outputs = []
    for p in pyramid.levels():
        x = head.recalibration(p) if recalibrate else p
        x = ops.relu(head.conv(x))
        outputs.append(RpnLevelOutput(head.cls_logits(x), head.bbox_pred(x)))
    return outputs


def _level_deltas(deltas: np.ndarray, num_anchors: int) -> np.ndarray:
    """[4A, H, W] -> [A*H*W, 4] in anchor order."""
    _, h, w = deltas.shape
    return deltas.reshape(num_anchors, 4, h, w).transpose(0, 2, 3, 1).reshape(-1, 4)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ========================================
# Proposals
# ========================================


def propose(
    outputs: Sequence[RpnLevelOutput],
    anchors: AnchorSet,
    cfg: RpnConfig,
    image_size: Sequence[int],
) -> list[Proposals]:
    """
    Turn RPN outputs into per-image proposals.

    Per level: top pre_nms_top by logit, decode, clip, drop boxes under
    min_size, NMS; then merge levels and keep the post_nms_top best.
    """
    batch = outputs[0].logits.shape[0]
    results = []
    for n in range(batch):
        boxes_per_level, scores_per_level = [], []
        for out, level in zip(outputs, anchors.levels):
            logits = out.logits.data[n].reshape(-1).astype(np.float64)
            deltas = _level_deltas(out.deltas.data[n], len(level.ratios))
            order = np.argsort(-logits, kind="stable")[: cfg.pre_nms_top]
            boxes = clip_boxes(decode(level.boxes[order], deltas[order]), image_size)
            scores = logits[order]
            valid = keep_valid(boxes, cfg.min_size)
            boxes, scores = boxes[valid], scores[valid]
            kept = nms(boxes, scores, cfg.nms_threshold)
            boxes_per_level.append(boxes[kept])
            scores_per_level.append(scores[kept])
        boxes = np.concatenate(boxes_per_level, axis=0)
        scores = np.concatenate(scores_per_level, axis=0)
        order = np.argsort(-scores, kind="stable")[: cfg.post_nms_top]
        results.append(Proposals(boxes[order], _sigmoid(scores[order])))
        if len(order) == 0:
            logger.debug("no_proposals", image=n)
    return results


# ========================================
# Loss
# ========================================


def assign_anchors(anchor_boxes: np.ndarray, gt_boxes: np.ndarray, cfg: RpnConfig):
    """
    Label anchors 1 (object), 0 (background) or -1 (ignored).

    Positive when IoU >= fg_iou or when the anchor is a best match of some
    ground-truth box; negative when IoU < bg_iou.

    Returns:
        (labels, matched gt index per anchor)
    """
    labels = np.full(len(anchor_boxes), -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchor_boxes), dtype=np.int64)
    iou = box_iou(anchor_boxes, gt_boxes)
    matched = iou.argmax(axis=1)
    best = iou.max(axis=1)
    labels[best < cfg.bg_iou] = 0
    labels[best >= cfg.fg_iou] = 1
    best_per_gt = iou.max(axis=0)
    anchor_idx, gt_idx = np.nonzero((iou == best_per_gt[None, :]) & (best_per_gt[None, :] > 0))
    labels[anchor_idx] = 1
    return labels, matched


def sample_labels(labels: np.ndarray, batch_size: int, positive_fraction: float, rng: np.random.Generator):
    """Random subset of positives (capped by the fraction) topped up with negatives."""
    positives = np.nonzero(labels == 1)[0]
    negatives = np.nonzero(labels == 0)[0]
    num_pos = min(len(positives), int(batch_size * positive_fraction))
    num_neg = min(len(negatives), batch_size - num_pos)
    pos = np.sort(rng.permutation(positives)[:num_pos])
    neg = np.sort(rng.permutation(negatives)[:num_neg])
    return pos, neg


def _gather_logits(outputs, anchors: AnchorSet, n: int, indices: np.ndarray) -> list[Tensor]:
    pieces = []
    start = 0
    for out, level in zip(outputs, anchors.levels):
        stop = start + level.count
        local = indices[(indices >= start) & (indices < stop)] - start
        if len(local):
            pieces.append(ops.take_flat(out.logits, n * level.count + local))
        start = stop
    return pieces


def _gather_deltas(outputs, anchors: AnchorSet, n: int, indices: np.ndarray) -> list[Tensor]:
    pieces = []
    start = 0
    for out, level in zip(outputs, anchors.levels):
        stop = start + level.count
        local = indices[(indices >= start) & (indices < stop)] - start
        if len(local):
            cells = level.height * level.width
            a, rem = np.divmod(local, cells)
            coords = np.arange(4)
            flat = n * 4 * level.count + (4 * a[:, None] + coords[None, :]) * cells + rem[:, None]
            pieces.append(ops.take_flat(out.deltas, flat))
        start = stop
    return pieces


def rpn_loss(
    outputs: Sequence[RpnLevelOutput],
    anchors: AnchorSet,
    gt_boxes: Sequence[np.ndarray],
    cfg: RpnConfig,
    rng: np.random.Generator,
) -> Tensor:
    """
    Objectness BCE over sampled anchors plus smooth-L1 on positive deltas,
    both divided by the number of sampled anchors and averaged over images.

    Images without ground truth contribute a classification-only loss over
    sampled negatives.
    """
    anchor_boxes = anchors.all_boxes()
    batch = outputs[0].logits.shape[0]
    total: Optional[Tensor] = None
    for n in range(batch):
        gt = np.asarray(gt_boxes[n], dtype=np.float64).reshape(-1, 4)
        labels, matched = assign_anchors(anchor_boxes, gt, cfg)
        pos, neg = sample_labels(labels, cfg.batch_size, cfg.positive_fraction, rng)
        sampled = np.sort(np.concatenate([pos, neg]))
        if len(sampled) == 0:
            continue
        logits = ops.concat(_gather_logits(outputs, anchors, n, sampled), axis=0)
        loss = ops.binary_cross_entropy_with_logits(logits, labels[sampled].astype(np.float64))
        if len(pos):
            deltas = ops.concat(_gather_deltas(outputs, anchors, n, pos), axis=0)
            targets = encode(anchor_boxes[pos], gt[matched[pos]])
            loss = ops.add(loss, ops.smooth_l1(deltas, targets))
        loss = ops.scale(loss, 1.0 / (len(sampled) * batch))
        total = loss if total is None else ops.add(total, loss)
    if total is None:
        return Tensor(0.0, dtype=outputs[0].logits.dtype)
    return total
