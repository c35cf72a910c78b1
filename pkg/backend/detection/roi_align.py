"""
RoIAlign: crop-and-resize of proposal regions into fixed 7x7 grids.

Conventions:
- boxes are in image pixels and map to a level by division by its stride
- feature cell centers sit at integer + 0.5 ("aligned" half-pixel convention)
- each output bin averages sampling x sampling regularly spaced bilinear samples
- samples beyond one cell outside the map read 0; samples within that band
  clamp to the border cell

Because bilinear weights factorize over rows and columns, each RoI is a pair
of sampling matrices (7 x H and 7 x W) and the crop is Ay @ F @ Ax^T.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from detection import ops
from detection.boxes import Box
from detection.exceptions import ShapeError
from detection.tensor import Function, Tensor

MIN_LEVEL = 2
MAX_LEVEL = 5


@dataclass
class RoiFeature:
    # [R, 256, 7, 7]
    tensor: Tensor
    # pyramid level (2..5) each RoI was cropped from
    source_level: np.ndarray
    rois: np.ndarray


def assign_level(box: Box, canonical_scale: float = 56.0) -> int:
    return int(assign_levels(box.as_array()[None, :], canonical_scale)[0])


def assign_levels(boxes: np.ndarray, canonical_scale: float = 56.0) -> np.ndarray:
    """
    k = clamp(floor(4 + log2(sqrt(w*h) / canonical_scale)), 2, 5); zero-area boxes go to level 2.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = np.clip(boxes[:, 2] - boxes[:, 0], 0, None)
    h = np.clip(boxes[:, 3] - boxes[:, 1], 0, None)
    scale = np.sqrt(w * h)
    levels = np.full(len(boxes), MIN_LEVEL, dtype=np.int64)
    positive = scale > 0
    raw = np.floor(4 + np.log2(scale[positive] / canonical_scale + 1e-12))
    levels[positive] = np.clip(raw, MIN_LEVEL, MAX_LEVEL).astype(np.int64)
    return levels


def axis_weights(start: float, length: float, out: int, sampling: int, size: int) -> np.ndarray:
    """
    [out, size] matrix averaging the bilinear weights of one axis' samples per bin.

    start/length are in feature-cell index space (cell i centered at index i).
    """
    bin_size = length / out
    coords = (
        start
        + np.arange(out)[:, None] * bin_size
        + (np.arange(sampling)[None, :] + 0.5) * bin_size / sampling
    )
    valid = (coords >= -1.0) & (coords <= size)
    coords = np.clip(coords, 0.0, None)
    low = np.floor(coords).astype(np.int64)
    at_edge = low >= size - 1
    low = np.where(at_edge, size - 1, low)
    high = np.where(at_edge, size - 1, low + 1)
    coords = np.where(at_edge, low.astype(np.float64), coords)
    frac = coords - low
    rows = np.broadcast_to(np.arange(out)[:, None], coords.shape)
    weights = np.zeros((out, size), dtype=np.float64)
    np.add.at(weights, (rows, low), (1.0 - frac) * valid / sampling)
    np.add.at(weights, (rows, high), frac * valid / sampling)
    return weights


def sampling_matrices(boxes: np.ndarray, stride: float, out: int, sampling: int, height: int, width: int):
    """Row and column sampling matrices [R, out, H] and [R, out, W] for each box."""
    ay = np.zeros((len(boxes), out, height), dtype=np.float64)
    ax = np.zeros((len(boxes), out, width), dtype=np.float64)
    for r, (x1, y1, x2, y2) in enumerate(np.asarray(boxes, dtype=np.float64)):
        fx1, fy1, fx2, fy2 = x1 / stride - 0.5, y1 / stride - 0.5, x2 / stride - 0.5, y2 / stride - 0.5
        ay[r] = axis_weights(fy1, max(fy2 - fy1, 0.0), out, sampling, height)
        ax[r] = axis_weights(fx1, max(fx2 - fx1, 0.0), out, sampling, width)
    return ay, ax


class RoIAlign(Function):
    def forward(self, feature, ay: np.ndarray, ax: np.ndarray, batch_index: np.ndarray):
        self.ay = ay.astype(feature.dtype)[:, None]
        self.ax = ax.astype(feature.dtype)[:, None]
        self.batch_index = batch_index
        self.feature_shape = feature.shape
        selected = feature[batch_index]
        return self.ay @ selected @ self.ax.transpose(0, 1, 3, 2)

    def backward(self, grad):
        per_roi = self.ay.transpose(0, 1, 3, 2) @ grad @ self.ax
        full = np.zeros(self.feature_shape, dtype=grad.dtype)
        np.add.at(full, self.batch_index, per_roi)
        return (full,)


def roi_align(
    feature: Tensor,
    boxes,
    stride: float,
    output_size: int = 7,
    sampling_ratio: int = 2,
    batch_index: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Crop boxes [R, 4] (image pixels) from feature [N, C, H, W] into [R, C, out, out].

    batch_index[r] names the image each box belongs to (default: image 0).
    """
    if feature.ndim != 4:
        raise ShapeError(f"roi_align expects a 4-D feature map, got {feature.shape}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if batch_index is None:
        batch_index = np.zeros(len(boxes), dtype=np.int64)
    batch_index = np.asarray(batch_index, dtype=np.int64)
    if len(batch_index) != len(boxes) or (len(batch_index) and batch_index.max() >= feature.shape[0]):
        raise ShapeError("roi_align batch_index does not match boxes and feature batch")
    _, _, h, w = feature.shape
    ay, ax = sampling_matrices(boxes, stride, output_size, sampling_ratio, h, w)
    return RoIAlign.apply(feature, ay=ay, ax=ax, batch_index=batch_index)


def multilevel_roi_align(
    pyramid,
    rois: np.ndarray,
    batch_index: np.ndarray,
    output_size: int = 7,
    sampling_ratio: int = 2,
    canonical_scale: float = 56.0,
) -> RoiFeature:
    """Crop each RoI from its assigned pyramid level; output rows follow the input RoI order."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    batch_index = np.asarray(batch_index, dtype=np.int64)
    levels = assign_levels(rois, canonical_scale)
    channels = pyramid.p2.shape[1]
    if len(rois) == 0:
        empty = Tensor(np.zeros((0, channels, output_size, output_size)), dtype=pyramid.p2.dtype)
        return RoiFeature(empty, levels, rois)
    pieces, order = [], []
    for k in range(MIN_LEVEL, MAX_LEVEL + 1):
        idx = np.nonzero(levels == k)[0]
        if len(idx) == 0:
            continue
        pieces.append(
            roi_align(
                pyramid.level(k),
                rois[idx],
                stride=2**k,
                output_size=output_size,
                sampling_ratio=sampling_ratio,
                batch_index=batch_index[idx],
            )
        )
        order.append(idx)
    stacked = ops.concat(pieces, axis=0)
    permutation = np.concatenate(order)
    if np.array_equal(permutation, np.arange(len(rois))):
        return RoiFeature(stacked, levels, rois)
    return RoiFeature(ops.take_rows(stacked, np.argsort(permutation, kind="stable")), levels, rois)
