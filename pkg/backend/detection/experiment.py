"""
Experiment configuration: frozen dataclasses with strict JSON round-tripping.

ExperimentConfig nests one section per concern (backbone, rpn, gca head,
optimizer, dataset). JSON keys are exactly the dataclass field names;
unknown keys are rejected at every level so a typo never silently falls
back to a default.

Usage:
    cfg = load_config("runs/full.json").with_overrides(mode="lightweight", seed=3)
    save_config(cfg, "runs/light.json")
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from detection.exceptions import ConfigError

FPN_CHANNELS = 256

MODES = ("baseline", "dense_no_attention", "full", "lightweight")
VARIANTS = ("conv", "fc1", "fc2", "conv_fc1", "conv_fc2", "conv_fc1_fc2")


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (32, 64, 128, 256)
    # 3x3 post-merge smoothing convs in the FPN top-down pathway
    smooth: bool = True

    def __post_init__(self):
        if len(self.widths) != 4 or any(int(w) <= 0 for w in self.widths):
            raise ConfigError(f"backbone.widths needs four positive widths, got {self.widths}")


@dataclass(frozen=True)
class RpnConfig:
    anchor_sizes: tuple = (16, 32, 64, 128)
    strides: tuple = (4, 8, 16, 32)
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    pre_nms_top: int = 256
    post_nms_top: int = 64
    nms_threshold: float = 0.7
    min_size: float = 1.0
    fg_iou: float = 0.7
    bg_iou: float = 0.3
    batch_size: int = 64
    positive_fraction: float = 0.5
    # sigmoid gate after the recalibration layer (off = plain FC product)
    recal_gate: bool = True
    # "fc" or "conv1x1"; None picks conv1x1 in lightweight mode, fc otherwise
    recal_layer: Optional[str] = None

    def __post_init__(self):
        if len(self.anchor_sizes) != len(self.strides):
            raise ConfigError("rpn.anchor_sizes and rpn.strides must have equal length")
        if self.recal_layer not in (None, "fc", "conv1x1"):
            raise ConfigError(f"rpn.recal_layer must be 'fc' or 'conv1x1', got {self.recal_layer!r}")


@dataclass(frozen=True)
class GcaConfig:
    pool_size: tuple = (16, 16)
    reduction: int = 8
    variant: str = "conv"
    mode: str = "full"
    num_classes: int = 3
    fc_dim: int = 1024
    # width of each encoding in the dense_no_attention concat-fusion head
    fusion_dim: int = 512
    roi_size: int = 7
    sampling_ratio: int = 2
    canonical_scale: float = 56.0
    share_branch_weights: bool = False
    class_agnostic: bool = False
    box_coder_weights: tuple = (10.0, 10.0, 5.0, 5.0)
    roi_batch_size: int = 32
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_bg_iou_low: float = 0.1
    roi_bg_iou_high: float = 0.5
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    detections_per_image: int = 100

    def __post_init__(self):
        m, n = self.pool_size
        if m <= 0 or n <= 0 or m % 8 or n % 8:
            raise ConfigError(f"gca.pool_size must be positive multiples of 8, got {self.pool_size}")
        if self.reduction <= 0 or FPN_CHANNELS % self.reduction:
            raise ConfigError(f"gca.reduction must divide {FPN_CHANNELS}, got {self.reduction}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"gca.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mode not in MODES:
            raise ConfigError(f"gca.mode must be one of {MODES}, got {self.mode!r}")
        if self.num_classes < 1:
            raise ConfigError("gca.num_classes must be at least 1")

    @property
    def hidden_width(self) -> int:
        return FPN_CHANNELS // self.reduction

    @property
    def gates(self) -> frozenset:
        """Attention sites named by the variant, e.g. {"conv", "fc2"}."""
        return frozenset(self.variant.split("_"))


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # epochs after which the learning rate is multiplied by lr_gamma
    lr_steps: tuple = (20, 26)
    lr_gamma: float = 0.1


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (128, 128)
    objects_per_image: int = 2
    num_classes: int = 3
    contextual_mode: bool = False
    seed: int = 0
    num_images: int = 64
    min_object_size: int = 14
    max_object_size: int = 40

    def __post_init__(self):
        h, w = self.image_size
        if h % 32 or w % 32:
            raise ConfigError(f"dataset.image_size must be divisible by 32, got {self.image_size}")
        if not 1 <= self.objects_per_image <= 4:
            raise ConfigError("dataset.objects_per_image must be within 1..4")
        if self.contextual_mode and self.num_classes % 2:
            raise ConfigError("contextual datasets pair every glyph with two hue buckets; num_classes must be even")


_SECTIONS = {
    "backbone": BackboneConfig,
    "rpn": RpnConfig,
    "gca": GcaConfig,
    "optimizer": OptimizerConfig,
    "dataset": SceneSpec,
}


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    gca: GcaConfig = field(default_factory=GcaConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: SceneSpec = field(default_factory=SceneSpec)
    rpn_recalibrate: bool = False
    epochs: int = 30
    seed: int = 0
    flip_probability: float = 0.5
    eval_images: int = 64
    # evaluation scenes start at this dataset index (0 = the training scenes)
    eval_offset: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.gca.num_classes != self.dataset.num_classes:
            raise ConfigError(
                f"gca.num_classes ({self.gca.num_classes}) must equal dataset.num_classes "
                f"({self.dataset.num_classes})"
            )

    # ----------------------------------------
    # Serialization
    # ----------------------------------------

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("Experiment config must be a JSON object")
        _reject_unknown(cls, data, "")
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in _SECTIONS:
                kwargs[key] = _section_from_dict(_SECTIONS[key], value, key)
            else:
                kwargs[key] = _coerce(cls, key, value)
        return _construct(cls, kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Invalid config JSON: {exc}") from exc
        return cls.from_dict(data)

    # ----------------------------------------
    # Overrides
    # ----------------------------------------

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """
        Return a copy with flat overrides applied.

        Recognized keys: mode, variant, pool_size, reduction (alias r),
        rpn_recalibrate, seed, scene_seed (the dataset seed), epochs,
        num_classes, contextual_mode, plus any top-level field. None values
        are ignored.
        """
        gca_keys = {"mode", "variant", "pool_size", "reduction", "fc_dim", "share_branch_weights"}
        dataset_keys = {"contextual_mode", "num_images", "objects_per_image"}
        gca_changes, dataset_changes, top_changes = {}, {}, {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "r":
                key = "reduction"
            if key in gca_keys:
                gca_changes[key] = tuple(value) if key == "pool_size" else value
            elif key in dataset_keys:
                dataset_changes[key] = value
            elif key == "scene_seed":
                dataset_changes["seed"] = value
            elif key == "num_classes":
                gca_changes[key] = value
                dataset_changes[key] = value
            elif key == "lr":
                top_changes["optimizer"] = dataclasses.replace(
                    top_changes.get("optimizer", self.optimizer), lr=value
                )
            elif key in {f.name for f in dataclasses.fields(self)} and key not in _SECTIONS:
                top_changes[key] = value
            else:
                raise ConfigError(f"Unknown override {key!r}")
        try:
            gca = dataclasses.replace(self.gca, **gca_changes)
            dataset = dataclasses.replace(self.dataset, **dataset_changes)
            return dataclasses.replace(self, gca=gca, dataset=dataset, **top_changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _reject_unknown(cls, data: dict, prefix: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(prefix + k for k in unknown)}")


def _coerce(cls, key: str, value):
    default = next(f for f in dataclasses.fields(cls) if f.name == key).default
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"Config key {key!r} expects a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _section_from_dict(cls, data, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"Config section {name!r} must be a JSON object")
    _reject_unknown(cls, data, f"{name}.")
    return _construct(cls, {k: _coerce(cls, k, v) for k, v in data.items()})


def _construct(cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_json(text)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_json() + "\n", encoding="utf-8")


def parse_pool_size(text: str) -> tuple[int, int]:
    """Parse "MxN" (e.g. "64x96") into (M, N)."""
    try:
        m, n = text.lower().split("x")
        return int(m), int(n)
    except ValueError as exc:
        raise ConfigError(f"Pool size must look like MxN, got {text!r}") from exc
