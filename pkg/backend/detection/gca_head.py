"""
Global context aware RoI heads.

This module provides:
- the dense global-context lattice: pyramid levels pooled to (M, N) x
  {1, 1/2, 1/4, 1/8} and pushed through four branches of {3, 2, 1, 0}
  stride-2 downsampling blocks, later branches concatenating the running
  features of earlier ones at their entry stage
- squeeze-excitation context descriptors (GAP -> FC/r -> ReLU -> FC -> sigmoid)
- context-aware branches with the six attention placements, decoupled
  classification/localization layers and element-wise-sum fusion
- the baseline two-FC box head, the dense-connection-only head and the
  lightweight single-descriptor head

Every head maps (pyramid, RoI features [R, 256, 7, 7], image index per RoI)
to (class logits [R, K+1], box deltas [R, 4K]).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from detection import ops
from detection.boxes import box_iou, encode
from detection.exceptions import ShapeError
from detection.experiment import FPN_CHANNELS, GcaConfig
from detection.nn import Conv2d, Linear, Module, ModuleList
from detection.tensor import Tensor

NUM_BRANCHES = 4
FC_GATE_SITES = ("fc1", "fc2")


# ========================================
# Dense lattice
# ========================================


def feeds_from_matrix(matrix_w: Sequence[Sequence[int]], num_branches: int = NUM_BRANCHES) -> tuple:
    """
    Expand the selection matrix into feeds[j][k] over branches.

    Columns 0 and 1 pick the running features of branches 0 and 1; column 2
    picks every branch before j.

    Raises:
        ShapeError: for a malformed matrix or a branch fed by itself or a later one
    """
    rows = [tuple(int(v) for v in row) for row in matrix_w]
    if len(rows) != num_branches or any(len(row) != 3 or set(row) - {0, 1} for row in rows):
        raise ShapeError(f"matrix_w must be {num_branches} x 3 of 0/1, got {matrix_w}")
    feeds = []
    for j, (first, second, earlier) in enumerate(rows):
        selected = {k for k in range(j)} if earlier else set()
        selected |= {k for k, bit in ((0, first), (1, second)) if bit}
        if any(k >= j for k in selected):
            raise ShapeError(f"branch {j} cannot be fed by branches {sorted(k for k in selected if k >= j)}")
        feeds.append(tuple(int(k in selected) for k in range(num_branches)))
    return tuple(feeds)


@dataclass(frozen=True)
class DenseLatticePlan:
    """
    Connectivity of the dense global-context lattice.

    With the default matrix branch j enters at stage j with
    [q_j, h_0, ..., h_{j-1}] (256 * (j + 1) channels) and then applies 3 - j
    downsampling blocks. ``feeds[j][k]`` is 1 when branch k's running
    feature is concatenated into branch j's entry. ``matrix_w`` is the 4 x 3
    selection matrix over (branch-0 running feature, branch-1 running
    feature, [g0, g1, g2]); ``feeds`` is derived from it. The last column
    stands for every earlier branch at once.
    """

    channels: int = FPN_CHANNELS
    num_branches: int = NUM_BRANCHES
    matrix_w: tuple = ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 0, 1))
    feeds: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "feeds", feeds_from_matrix(self.matrix_w, self.num_branches))

    def entry_stage(self, j: int) -> int:
        return j

    def entry_channels(self, j: int) -> int:
        return self.channels * (1 + sum(self.feeds[j]))

    def num_blocks(self, j: int) -> int:
        return self.num_branches - 1 - j

    def dependency(self) -> np.ndarray:
        """dep[j, k] = 1 when g_j depends on pooled level q_k."""
        dep = np.eye(self.num_branches, dtype=np.int64)
        for j in range(self.num_branches):
            for k in range(j):
                if self.feeds[j][k]:
                    dep[j] |= dep[k]
        return dep


@dataclass
class GlobalContextSet:
    g0: Tensor
    g1: Tensor
    g2: Tensor
    g3: Tensor

    def maps(self) -> list[Tensor]:
        return [self.g0, self.g1, self.g2, self.g3]


def pool_pyramid(pyramid, pool_size: Sequence[int]) -> list[Tensor]:
    """
    q_i = adaptive_avg_pool(p_{i+2}, M / 2^i, N / 2^i).

    Raises:
        ShapeError: if a pooled size is not divisible or exceeds its source level
    """
    m, n = pool_size
    if m % 8 or n % 8:
        raise ShapeError(f"pool size must be divisible by 8, got {pool_size}")
    pooled = []
    for i, p in enumerate(pyramid.levels()):
        oh, ow = m >> i, n >> i
        if oh > p.shape[2] or ow > p.shape[3]:
            raise ShapeError(f"pool size ({oh},{ow}) exceeds p{i + 2} extent {p.shape[2:]}")
        if (oh, ow) == tuple(p.shape[2:]):
            pooled.append(p)
        else:
            pooled.append(ops.adaptive_avg_pool(p, oh, ow))
    return pooled


class DenseGlobalContext(Module):
    def __init__(self, plan: DenseLatticePlan = DenseLatticePlan()):
        self.plan = plan
        c = plan.channels
        branches = []
        for j in range(plan.num_branches):
            blocks = [
                Conv2d(plan.entry_channels(j) if b == 0 else c, c, 3, stride=2)
                for b in range(plan.num_blocks(j))
            ]
            branches.append(ModuleList(blocks))
        self.branches = ModuleList(branches)
        # the zero-block branch still has to come back to 256 channels
        self.reduce = Conv2d(plan.entry_channels(plan.num_branches - 1), c, 1)

    def forward(self, pooled: Sequence[Tensor]) -> GlobalContextSet:
        return dense_global_context(self, pooled)


def dense_global_context(lattice: DenseGlobalContext, pooled: Sequence[Tensor]) -> GlobalContextSet:
    """
    Run the lattice stage by stage.

    At stage t branch t enters with its concatenated input, then every active
    branch applies its next downsampling block so all branches reach stage t + 1
    together.

    Raises:
        ShapeError: if a pooled level does not match its stage extent
    """
    plan = lattice.plan
    if len(pooled) != plan.num_branches:
        raise ShapeError(f"expected {plan.num_branches} pooled levels, got {len(pooled)}")
    running: list[Tensor] = []
    for t, q in enumerate(pooled):
        if running and running[0].shape[2:] != q.shape[2:]:
            raise ShapeError(f"stage {t} extent mismatch: {running[0].shape[2:]} vs {q.shape[2:]}")
        feeders = [running[k] for k in range(t) if plan.feeds[t][k]]
        running.append(ops.concat_channels([q, *feeders]) if feeders else q)
        if t < plan.num_branches - 1:
            running = [
                ops.relu(lattice.branches[k][t - k](h)) for k, h in enumerate(running)
            ]
    running[-1] = ops.relu(lattice.reduce(running[-1]))
    return GlobalContextSet(*running)


# ========================================
# Context descriptors
# ========================================


@dataclass
class ContextDescriptor:
    # [N, 256], every entry in (0, 1)
    s: Tensor
    # [N, fc_dim] gates of the first and second fully connected stages
    s_fc1: Optional[Tensor] = None
    s_fc2: Optional[Tensor] = None


class SqueezeExcitation(Module):
    """
    One shared bottleneck with a parallel output projection per gate site:
    ``fc2`` for the RoI feature map and ``gate_fc1`` / ``gate_fc2`` for the
    fully connected stages named in ``fc_gates``.
    """

    def __init__(
        self,
        reduction: int = 8,
        fc_gates: Sequence[str] = (),
        wide_dim: Optional[int] = None,
        channels: int = FPN_CHANNELS,
    ):
        if reduction <= 0 or channels % reduction:
            raise ShapeError(f"reduction {reduction} must divide {channels}")
        unknown = set(fc_gates) - set(FC_GATE_SITES)
        if unknown:
            raise ShapeError(f"unknown fully connected gate sites {sorted(unknown)}")
        if fc_gates and not wide_dim:
            raise ShapeError("fully connected gates need the width of the layer they scale")
        hidden = channels // reduction
        self.fc1 = Linear(channels, hidden)
        self.fc2 = Linear(hidden, channels)
        self.gate_fc1 = Linear(hidden, wide_dim) if "fc1" in fc_gates else None
        self.gate_fc2 = Linear(hidden, wide_dim) if "fc2" in fc_gates else None

    def output_projections(self) -> list[Linear]:
        return [p for p in (self.fc2, self.gate_fc1, self.gate_fc2) if p is not None]

    @property
    def hidden_width(self) -> int:
        return self.fc1.weight.shape[0]

    def forward(self, g: Tensor) -> ContextDescriptor:
        return context_descriptor(self, g)


def context_descriptor(se: SqueezeExcitation, g: Tensor) -> ContextDescriptor:
    """s = sigmoid(fc2(relu(fc1(gap(g))))); g may already be pooled to [N, 256]."""
    z = ops.global_avg_pool(g) if g.ndim == 4 else g
    hidden = ops.relu(se.fc1(z))
    s = ops.sigmoid(se.fc2(hidden))
    s_fc1 = ops.sigmoid(se.gate_fc1(hidden)) if se.gate_fc1 is not None else None
    s_fc2 = ops.sigmoid(se.gate_fc2(hidden)) if se.gate_fc2 is not None else None
    return ContextDescriptor(s, s_fc1, s_fc2)


def lightweight_descriptor(se: SqueezeExcitation, pyramid) -> ContextDescriptor:
    """One descriptor from the element-wise sum of every level's global average."""
    z = ops.add_all([ops.global_avg_pool(p) for p in pyramid.levels()])
    return context_descriptor(se, z)


def _per_roi(gate: Tensor, image_index: np.ndarray) -> Tensor:
    if len(image_index) and image_index.max() >= gate.shape[0]:
        raise ShapeError(
            f"RoI image index {int(image_index.max())} has no descriptor (batch {gate.shape[0]})"
        )
    return ops.take_rows(gate, image_index)


# ========================================
# Branches
# ========================================


class ContextAwareBranch(Module):
    """Attention on a global-context map followed by decoupled cls/loc layers."""

    def __init__(self, cfg: GcaConfig, channels: int = FPN_CHANNELS):
        fc_gates = sorted(cfg.gates & set(FC_GATE_SITES))
        self.se = SqueezeExcitation(cfg.reduction, fc_gates, wide_dim=cfg.fc_dim, channels=channels)
        self.fc1 = Linear(channels * cfg.roi_size * cfg.roi_size, cfg.fc_dim)
        self.fc_cls = Linear(cfg.fc_dim, cfg.fc_dim)
        self.fc_loc = Linear(cfg.fc_dim, cfg.fc_dim)


class DenseFusionBranch(Module):
    """Dense connection without attention: two encodings concatenated into one FC."""

    def __init__(self, cfg: GcaConfig, channels: int = FPN_CHANNELS):
        self.global_encoder = Linear(channels, cfg.fusion_dim)
        self.roi_encoder = Linear(channels * cfg.roi_size * cfg.roi_size, cfg.fusion_dim)
        self.fuse = Linear(2 * cfg.fusion_dim, cfg.fc_dim)
        self.fc_cls = Linear(cfg.fc_dim, cfg.fc_dim)
        self.fc_loc = Linear(cfg.fc_dim, cfg.fc_dim)


def apply_attention(
    branch: ContextAwareBranch,
    roi: Tensor,
    desc: ContextDescriptor,
    image_index: np.ndarray,
    variant: str,
) -> Tensor:
    """
    Branch trunk [R, fc_dim] with the variant's gates before and after fc1.

    "conv" scales the 256x7x7 RoI feature by s; "fc1" scales the ReLU'd fc1
    output by its own gate s_fc1. Gates on the second stage live in branch_head.
    """
    gates = frozenset(variant.split("_"))
    x = roi
    if "conv" in gates:
        x = ops.channel_scale(x, _per_roi(desc.s, image_index))
    trunk = ops.relu(branch.fc1(ops.flatten(x)))
    if "fc1" in gates:
        trunk = ops.channel_scale(trunk, _per_roi(desc.s_fc1, image_index))
    return trunk


def branch_head(
    branch,
    trunk: Tensor,
    desc: Optional[ContextDescriptor],
    image_index: np.ndarray,
    variant: str,
) -> tuple[Tensor, Tensor]:
    """Parallel cls/loc layers; the "fc2" gate s_fc2 scales both after their ReLU."""
    cls_feat = ops.relu(branch.fc_cls(trunk))
    loc_feat = ops.relu(branch.fc_loc(trunk))
    if desc is not None and "fc2" in variant.split("_"):
        gate = _per_roi(desc.s_fc2, image_index)
        cls_feat = ops.channel_scale(cls_feat, gate)
        loc_feat = ops.channel_scale(loc_feat, gate)
    return cls_feat, loc_feat


def fuse_branches(outputs: Sequence[tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
    """Element-wise sum over branches, separately for the cls and loc streams."""
    if len(outputs) != NUM_BRANCHES:
        raise ShapeError(f"expected {NUM_BRANCHES} branch outputs, got {len(outputs)}")
    return ops.add_all([cls for cls, _ in outputs]), ops.add_all([loc for _, loc in outputs])


# ========================================
# Prediction
# ========================================


class Predictor(Module):
    def __init__(self, fc_dim: int, num_classes: int, class_agnostic: bool = False):
        self.num_classes = num_classes
        self.class_agnostic = class_agnostic
        self.cls_score = Linear(fc_dim, num_classes + 1)
        self.bbox_pred = Linear(fc_dim, 4 if class_agnostic else 4 * num_classes)

    def forward(self, cls_feat: Tensor, loc_feat: Tensor) -> tuple[Tensor, Tensor]:
        return predict(self, cls_feat, loc_feat)


def predict(predictor: Predictor, cls_feat: Tensor, loc_feat: Tensor) -> tuple[Tensor, Tensor]:
    """Class logits [R, K+1] (softmax is applied at inference only) and deltas [R, 4K]."""
    return predictor.cls_score(cls_feat), predictor.bbox_pred(loc_feat)


# ========================================
# Heads
# ========================================


class BaselineHead(Module):
    """Two shared FC layers (fc_dim, fc_dim) feeding both predictors."""

    mode = "baseline"

    def __init__(self, cfg: GcaConfig, channels: int = FPN_CHANNELS):
        self.cfg = cfg
        self.fc6 = Linear(channels * cfg.roi_size * cfg.roi_size, cfg.fc_dim)
        self.fc7 = Linear(cfg.fc_dim, cfg.fc_dim)
        self.predictor = Predictor(cfg.fc_dim, cfg.num_classes, cfg.class_agnostic)

    def trunk(self, roi: Tensor) -> Tensor:
        return ops.relu(self.fc7(ops.relu(self.fc6(ops.flatten(roi)))))

    def forward(self, pyramid, roi: Tensor, image_index: np.ndarray) -> tuple[Tensor, Tensor]:
        x = self.trunk(roi)
        return predict(self.predictor, x, x)


class LightweightHead(BaselineHead):
    """Baseline head whose RoI features are gated by one pyramid-wide descriptor."""

    mode = "lightweight"

    def __init__(self, cfg: GcaConfig, channels: int = FPN_CHANNELS):
        super().__init__(cfg, channels)
        self.se = SqueezeExcitation(cfg.reduction, channels=channels)

    def forward(self, pyramid, roi: Tensor, image_index: np.ndarray) -> tuple[Tensor, Tensor]:
        desc = lightweight_descriptor(self.se, pyramid)
        x = self.trunk(ops.channel_scale(roi, _per_roi(desc.s, image_index)))
        return predict(self.predictor, x, x)


class GlobalContextHead(Module):
    """
    Four context-aware branches over the dense lattice, fused by sum.

    mode "full" uses squeeze-excitation attention; "dense_no_attention"
    replaces it with the 512 + 512 -> fc_dim concat-fusion encoding.
    """

    def __init__(self, cfg: GcaConfig, channels: int = FPN_CHANNELS):
        self.cfg = cfg
        self.mode = cfg.mode
        self.lattice = DenseGlobalContext(DenseLatticePlan(channels=channels))
        branch_cls = ContextAwareBranch if cfg.mode == "full" else DenseFusionBranch
        if cfg.share_branch_weights:
            shared = branch_cls(cfg, channels)
            self.branches = ModuleList([shared] * NUM_BRANCHES)
        else:
            self.branches = ModuleList([branch_cls(cfg, channels) for _ in range(NUM_BRANCHES)])
        self.predictor = Predictor(cfg.fc_dim, cfg.num_classes, cfg.class_agnostic)

    def global_context(self, pyramid) -> GlobalContextSet:
        return dense_global_context(self.lattice, pool_pyramid(pyramid, self.cfg.pool_size))

    def forward(self, pyramid, roi: Tensor, image_index: np.ndarray) -> tuple[Tensor, Tensor]:
        context = self.global_context(pyramid)
        outputs = []
        for branch, g in zip(self.branches, context.maps()):
            if self.mode == "full":
                desc = context_descriptor(branch.se, g)
                trunk = apply_attention(branch, roi, desc, image_index, self.cfg.variant)
                outputs.append(branch_head(branch, trunk, desc, image_index, self.cfg.variant))
            else:
                encoded_g = ops.relu(branch.global_encoder(ops.global_avg_pool(g)))
                encoded_roi = ops.relu(branch.roi_encoder(ops.flatten(roi)))
                joint = ops.concat([_per_roi(encoded_g, image_index), encoded_roi], axis=1)
                trunk = ops.relu(branch.fuse(joint))
                outputs.append(branch_head(branch, trunk, None, image_index, self.cfg.variant))
        cls_feat, loc_feat = fuse_branches(outputs)
        return predict(self.predictor, cls_feat, loc_feat)


def build_head(cfg: GcaConfig, channels: int = FPN_CHANNELS) -> Module:
    if cfg.mode == "baseline":
        return BaselineHead(cfg, channels)
    if cfg.mode == "lightweight":
        return LightweightHead(cfg, channels)
    return GlobalContextHead(cfg, channels)


# ========================================
# RoI sampling and loss
# ========================================


@dataclass
class SampledRois:
    boxes: np.ndarray
    # 0 = background, 1..K = foreground class
    labels: np.ndarray
    # encoded (dx, dy, dw, dh) toward the matched gt; zero rows for background
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def num_foreground(self) -> int:
        return int(np.count_nonzero(self.labels))


def sample_rois(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    cfg: GcaConfig,
    rng: np.random.Generator,
) -> SampledRois:
    """
    Pick the RoIs one image contributes to the head loss.

    Ground-truth boxes join the candidate set. A candidate is foreground when
    its best IoU is at least roi_fg_iou and background when that IoU lies in
    [roi_bg_iou_low, roi_bg_iou_high). At most roi_fg_fraction of the
    roi_batch_size slots go to foreground; background fills the rest.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    candidates = np.concatenate([np.asarray(proposals, dtype=np.float64).reshape(-1, 4), gt_boxes], axis=0)
    if len(gt_boxes) == 0:
        empty = np.zeros((0, 4))
        return SampledRois(empty, np.zeros(0, dtype=np.int64), empty.copy())
    iou = box_iou(candidates, gt_boxes)
    matched = iou.argmax(axis=1)
    best = iou.max(axis=1)
    foreground = np.nonzero(best >= cfg.roi_fg_iou)[0]
    background = np.nonzero((best >= cfg.roi_bg_iou_low) & (best < cfg.roi_bg_iou_high))[0]
    num_fg = min(len(foreground), int(cfg.roi_batch_size * cfg.roi_fg_fraction))
    num_bg = min(len(background), cfg.roi_batch_size - num_fg)
    fg = np.sort(rng.permutation(foreground)[:num_fg])
    bg = np.sort(rng.permutation(background)[:num_bg])
    keep = np.concatenate([fg, bg])
    labels = np.concatenate([gt_labels[matched[fg]], np.zeros(len(bg), dtype=np.int64)])
    targets = np.zeros((len(keep), 4), dtype=np.float64)
    if len(fg):
        targets[: len(fg)] = encode(candidates[fg], gt_boxes[matched[fg]], cfg.box_coder_weights)
    return SampledRois(candidates[keep], labels, targets)


def class_delta_columns(labels: np.ndarray, num_columns: int) -> np.ndarray:
    """Column indices [R, 4] of each RoI's class-specific deltas."""
    if num_columns == 4:
        return np.broadcast_to(np.arange(4), (len(labels), 4))
    return 4 * (labels[:, None] - 1) + np.arange(4)[None, :]


def head_loss(scores: Tensor, deltas: Tensor, sampled: SampledRois) -> Tensor:
    """
    Mean cross-entropy over K + 1 classes plus smooth-L1 on the true class'
    deltas of foreground RoIs, both divided by the number of sampled RoIs.

    An image with no sampled RoIs contributes an exact zero.
    """
    count = len(sampled)
    if count == 0:
        return Tensor(0.0, dtype=scores.dtype)
    if scores.shape[0] != count or deltas.shape[0] != count:
        raise ShapeError(f"head outputs cover {scores.shape[0]} RoIs, {count} were sampled")
    loss = ops.softmax_cross_entropy(scores, sampled.labels)
    fg = np.nonzero(sampled.labels > 0)[0]
    if len(fg):
        columns = class_delta_columns(sampled.labels[fg], deltas.shape[1])
        picked = ops.take_flat(deltas, fg[:, None] * deltas.shape[1] + columns)
        loss = ops.add(loss, ops.smooth_l1(picked, sampled.targets[fg]))
    return ops.scale(loss, 1.0 / count)
