"""
The two-stage detector: backbone, feature pyramid, RPN, RoIAlign and a box head.

This module provides:
- GcaRcnn: the assembled network with deterministic initialization
- GcaRcnn.losses: rpn_loss + head_loss (weighted 1:1) for one image
- GcaRcnn.detect: propose -> head -> softmax -> per-class decode, score
  threshold, per-class NMS and top-k
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import structlog

from detection import ops
from detection.backbone import Backbone, FeaturePyramid, PyramidFeatures
from detection.boxes import AnchorSet, batched_nms, clip_boxes, decode, generate_anchors, keep_valid
from detection.exceptions import ShapeError
from detection.experiment import ExperimentConfig
from detection.gca_head import build_head, head_loss, sample_rois
from detection.nn import Module
from detection.optim import initialize
from detection.roi_align import multilevel_roi_align
from detection.rpn import RpnHead, propose, rpn_loss
from detection.tensor import Tensor, get_default_dtype

logger = structlog.get_logger(__name__)

# synthetic scenes are rendered in [0, 1]
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


@dataclass
class LossBreakdown:
    rpn: Tensor
    head: Tensor
    total: Tensor
    num_rois: int = 0
    num_foreground: int = 0

    def as_dict(self) -> dict[str, float]:
        return {"rpn_loss": self.rpn.item(), "head_loss": self.head.item(), "total_loss": self.total.item()}


@dataclass
class Detections:
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


def normalize_image(image: np.ndarray) -> np.ndarray:
    """[3, H, W] pixels in [0, 1] -> [1, 3, H, W] zero-centred network input."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a [3, H, W] image, got {image.shape}")
    return ((image - IMAGE_MEAN) / IMAGE_STD)[None]


class GcaRcnn(Module):
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.fpn = FeaturePyramid(self.backbone.widths, smooth=cfg.backbone.smooth)
        recal_layer = cfg.rpn.recal_layer or ("conv1x1" if cfg.gca.mode == "lightweight" else "fc")
        self.rpn = RpnHead(cfg.rpn, recalibrate=cfg.rpn_recalibrate, recal_layer=recal_layer)
        self.head = build_head(cfg.gca)
        self._anchor_cache: dict[tuple, AnchorSet] = {}

    def forward(self, image: np.ndarray) -> PyramidFeatures:
        return self.pyramid(image)

    def pyramid(self, image: np.ndarray) -> PyramidFeatures:
        x = Tensor(normalize_image(image), dtype=get_default_dtype())
        return self.fpn(self.backbone(x))

    def anchors(self, pyramid: PyramidFeatures) -> AnchorSet:
        sizes = tuple(tuple(p.shape[2:]) for p in pyramid.levels())
        if sizes not in self._anchor_cache:
            self._anchor_cache[sizes] = generate_anchors(
                sizes, self.cfg.rpn.strides, self.cfg.rpn.anchor_sizes, self.cfg.rpn.aspect_ratios
            )
        return self._anchor_cache[sizes]

    def head_forward(self, pyramid: PyramidFeatures, rois: np.ndarray) -> tuple[Tensor, Tensor]:
        """Class logits and box deltas for RoIs of a single image."""
        gca = self.cfg.gca
        image_index = np.zeros(len(rois), dtype=np.int64)
        crops = multilevel_roi_align(
            pyramid,
            rois,
            image_index,
            output_size=gca.roi_size,
            sampling_ratio=gca.sampling_ratio,
            canonical_scale=gca.canonical_scale,
        )
        return self.head(pyramid, crops.tensor, image_index)

    # ----------------------------------------
    # Training
    # ----------------------------------------

    def losses(
        self,
        image: np.ndarray,
        gt_boxes: np.ndarray,
        gt_labels: np.ndarray,
        rng: np.random.Generator,
        proposals: Optional[np.ndarray] = None,
    ) -> LossBreakdown:
        """
        Total training loss of one image.

        proposals overrides the RPN's own proposals (used by gradient checks,
        where a finite perturbation must not change the discrete RoI set).
        """
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        image_size = tuple(np.asarray(image).shape[1:])
        pyramid = self.pyramid(image)
        outputs = self.rpn(pyramid)
        anchors = self.anchors(pyramid)
        loss_rpn = rpn_loss(outputs, anchors, [gt_boxes], self.cfg.rpn, rng)
        if proposals is None:
            proposals = propose(outputs, anchors, self.cfg.rpn, image_size)[0].boxes
        sampled = sample_rois(proposals, gt_boxes, gt_labels, self.cfg.gca, rng)
        if len(sampled) == 0:
            loss_head = Tensor(0.0, dtype=loss_rpn.dtype)
        else:
            scores, deltas = self.head_forward(pyramid, sampled.boxes)
            loss_head = head_loss(scores, deltas, sampled)
        return LossBreakdown(
            rpn=loss_rpn,
            head=loss_head,
            total=ops.add(loss_rpn, loss_head),
            num_rois=len(sampled),
            num_foreground=sampled.num_foreground,
        )

    # ----------------------------------------
    # Inference
    # ----------------------------------------

    def detect(self, image: np.ndarray) -> Detections:
        image_size = tuple(np.asarray(image).shape[1:])
        pyramid = self.pyramid(image)
        outputs = self.rpn(pyramid)
        proposals = propose(outputs, self.anchors(pyramid), self.cfg.rpn, image_size)[0]
        if len(proposals) == 0:
            return Detections.empty()
        scores, deltas = self.head_forward(pyramid, proposals.boxes)
        return postprocess(proposals.boxes, scores.data, deltas.data, self.cfg, image_size)


def postprocess(
    rois: np.ndarray,
    logits: np.ndarray,
    deltas: np.ndarray,
    cfg: ExperimentConfig,
    image_size: Sequence[int],
) -> Detections:
    """Softmax, per-class decode and clip, score threshold, per-class NMS, top-k."""
    gca = cfg.gca
    probs = ops.softmax(np.asarray(logits, dtype=np.float64))
    deltas = np.asarray(deltas, dtype=np.float64)
    boxes, scores, labels = [], [], []
    for k in range(1, gca.num_classes + 1):
        columns = slice(0, 4) if deltas.shape[1] == 4 else slice(4 * (k - 1), 4 * k)
        decoded = clip_boxes(decode(rois, deltas[:, columns], gca.box_coder_weights), image_size)
        keep = np.nonzero(probs[:, k] > gca.score_threshold)[0]
        keep = keep[keep_valid(decoded[keep], 1e-3)]
        boxes.append(decoded[keep])
        scores.append(probs[keep, k])
        labels.append(np.full(len(keep), k, dtype=np.int64))
    boxes = np.concatenate(boxes, axis=0)
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    if len(boxes) == 0:
        return Detections.empty()
    kept = batched_nms(boxes, scores, labels, gca.nms_threshold)[: gca.detections_per_image]
    return Detections(boxes[kept], scores[kept], labels[kept])


def build_model(cfg: ExperimentConfig, seed: Optional[int] = None) -> GcaRcnn:
    """
    Construct and initialize a detector in the current default dtype.

    Initial values depend only on (seed, parameter path).
    """
    model = GcaRcnn(cfg)
    seed = cfg.seed if seed is None else seed
    initialize(model, seed)
    logger.debug(
        "model_built",
        mode=cfg.gca.mode,
        variant=cfg.gca.variant,
        parameters=model.num_parameters(),
        head_parameters=model.head.num_parameters(),
    )
    return model