"""
Tiny trainable backbone and the feature pyramid built on top of it.

The backbone has four stages of two 3x3 conv + ReLU layers. Both convs of
the first stage use stride 2 (a stride-4 stem), every later stage opens with
a stride-2 conv, so the stages sit at strides 4, 8, 16 and 32.

The pyramid follows the usual top-down pathway: 1x1 lateral convs to 256
channels, nearest-neighbour 2x upsampling merged by element-wise sum, and a
3x3 smoothing conv on every merged map.
"""

from __future__ import annotations

from dataclasses import dataclass

from detection import ops
from detection.exceptions import ShapeError
from detection.experiment import FPN_CHANNELS, BackboneConfig
from detection.nn import Conv2d, Module, ModuleList
from detection.tensor import Tensor

LEVELS = (2, 3, 4, 5)
STRIDES = (4, 8, 16, 32)


@dataclass
class BackboneFeatures:
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.c2, self.c3, self.c4, self.c5]


@dataclass
class PyramidFeatures:
    p2: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.p2, self.p3, self.p4, self.p5]

    def level(self, k: int) -> Tensor:
        return getattr(self, f"p{k}")


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig(), in_channels: int = 3):
        self.widths = tuple(int(w) for w in cfg.widths)
        stages = []
        cin = in_channels
        for k, width in enumerate(self.widths):
            first_stride = 2
            second_stride = 2 if k == 0 else 1
            stages.append(
                ModuleList([Conv2d(cin, width, 3, stride=first_stride), Conv2d(width, width, 3, stride=second_stride)])
            )
            cin = width
        self.stages = ModuleList(stages)

    def forward(self, image: Tensor) -> BackboneFeatures:
        return backbone_forward(self, image)


def backbone_forward(backbone: Backbone, image: Tensor) -> BackboneFeatures:
    """
    Run the four stages on a [N, 3, H, W] image batch.

    Raises:
        ShapeError: if H or W is not divisible by 32
    """
    if image.ndim != 4 or image.shape[2] % 32 or image.shape[3] % 32:
        raise ShapeError(f"backbone input extents must be divisible by 32, got {image.shape}")
    x = image
    outputs = []
    for stage in backbone.stages:
        for conv in stage:
            x = ops.relu(conv(x))
        outputs.append(x)
    return BackboneFeatures(*outputs)


class FeaturePyramid(Module):
    def __init__(self, in_widths, smooth: bool = True, channels: int = FPN_CHANNELS):
        self.in_widths = tuple(in_widths)
        self.lateral = ModuleList([Conv2d(w, channels, 1) for w in self.in_widths])
        self.smooth = ModuleList([Conv2d(channels, channels, 3) for _ in self.in_widths]) if smooth else None

    def forward(self, feats: BackboneFeatures) -> PyramidFeatures:
        return build_pyramid(self, feats)


def build_pyramid(fpn: FeaturePyramid, feats: BackboneFeatures) -> PyramidFeatures:
    """
    Merge backbone levels top-down into {p2, p3, p4, p5}.

    Raises:
        ShapeError: if channel widths or the 2x stride chain are inconsistent
    """
    levels = feats.levels()
    for c, width in zip(levels, fpn.in_widths):
        if c.shape[1] != width:
            raise ShapeError(f"FPN expected {width} channels, got {c.shape[1]}")
    for lower, upper in zip(levels, levels[1:]):
        if lower.shape[2] != 2 * upper.shape[2] or lower.shape[3] != 2 * upper.shape[3]:
            raise ShapeError(f"FPN stride chain broken between {lower.shape} and {upper.shape}")

    merged = [None] * 4
    top = fpn.lateral[3](levels[3])
    merged[3] = top
    for k in (2, 1, 0):
        top = ops.add(fpn.lateral[k](levels[k]), ops.upsample_nearest2x(top))
        merged[k] = top
    if fpn.smooth is not None:
        merged = [fpn.smooth[k](m) for k, m in enumerate(merged)]
    return PyramidFeatures(*merged)
