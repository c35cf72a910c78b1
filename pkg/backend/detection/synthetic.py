"""
Deterministic synthetic detection scenes.

Every scene is a function of (spec.seed, index): solid glyphs (rectangles,
discs, triangles) over a uniform background, one glyph per quadrant cell so
objects never overlap and always lie inside the image.

In contextual mode classes come in pairs sharing one glyph and one fill
color; the label of every object is decided by the background hue bucket
alone, so a classifier has to look beyond the object to tell a pair apart.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from detection.exceptions import DatasetError
from detection.experiment import SceneSpec

SHAPES = ("rectangle", "disc", "triangle")

# contextual backgrounds: bucket 0 cool, bucket 1 warm
HUE_BUCKETS = (
    np.array([0.15, 0.25, 0.60]),
    np.array([0.60, 0.25, 0.15]),
)
CONTEXT_GLYPH_COLORS = (
    np.array([0.95, 0.95, 0.95]),
    np.array([0.95, 0.90, 0.30]),
    np.array([0.30, 0.95, 0.50]),
)
# 2 x 2 placement cells
GRID = 2
CELL_MARGIN = 2


@dataclass
class Scene:
    # [3, H, W] in [0, 1]
    image: np.ndarray
    # [n, 4] (x1, y1, x2, y2) pixels
    boxes: np.ndarray
    # [n] in 1..K
    labels: np.ndarray
    index: int = 0
    hue_bucket: Optional[int] = None

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), index]))


def glyph_for_label(label: int, spec: SceneSpec) -> tuple[int, Optional[int]]:
    """(shape index, hue bucket) a label renders as; the bucket is None outside contextual mode."""
    if spec.contextual_mode:
        pair, bucket = divmod(label - 1, 2)
        return pair % len(SHAPES), bucket
    return (label - 1) % len(SHAPES), None


def _shape_mask(shape: str, x1: int, y1: int, x2: int, y2: int, height: int, width: int) -> np.ndarray:
    """Boolean [H, W] mask of pixels whose centers fall inside the glyph."""
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    inside_box = (xs >= x1) & (xs < x2) & (ys >= y1) & (ys < y2)
    if shape == "rectangle":
        return inside_box
    if shape == "disc":
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return inside_box & (((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0)
    # apex at the top center, base along the bottom edge
    cx = (x1 + x2) / 2
    half = (x2 - x1) / 2
    depth = (ys - y1) / (y2 - y1)
    return inside_box & (np.abs(xs - cx) <= half * depth)


def _tight_box(mask: np.ndarray) -> np.ndarray:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    """
    Render scene number `index` of a dataset.

    Boxes are the tight pixel bounds of each rendered glyph.
    """
    rng = scene_rng(spec.seed, index)
    height, width = spec.image_size
    cell_h, cell_w = height // GRID, width // GRID
    max_size = min(spec.max_object_size, cell_h - 2 * CELL_MARGIN, cell_w - 2 * CELL_MARGIN)
    min_size = min(spec.min_object_size, max_size)

    bucket = None
    if spec.contextual_mode:
        bucket = int(rng.integers(0, 2))
        background = np.clip(HUE_BUCKETS[bucket] + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    else:
        background = rng.uniform(0.0, 0.35, size=3)
    image = np.broadcast_to(background[:, None, None], (3, height, width)).copy()

    cells = rng.permutation(GRID * GRID)[: spec.objects_per_image]
    boxes, labels = [], []
    for cell in np.sort(cells):
        if spec.contextual_mode:
            pair = int(rng.integers(0, spec.num_classes // 2))
            label = 2 * pair + bucket + 1
            color = CONTEXT_GLYPH_COLORS[pair % len(CONTEXT_GLYPH_COLORS)]
        else:
            label = int(rng.integers(1, spec.num_classes + 1))
            color = rng.uniform(0.6, 1.0, size=3)
        shape_index, _ = glyph_for_label(label, spec)
        bw, bh = (int(v) for v in rng.integers(min_size, max_size + 1, size=2))
        if SHAPES[shape_index] == "disc":
            bh = bw
        row, col = divmod(int(cell), GRID)
        x1 = col * cell_w + CELL_MARGIN + int(rng.integers(0, cell_w - 2 * CELL_MARGIN - bw + 1))
        y1 = row * cell_h + CELL_MARGIN + int(rng.integers(0, cell_h - 2 * CELL_MARGIN - bh + 1))
        mask = _shape_mask(SHAPES[shape_index], x1, y1, x1 + bw, y1 + bh, height, width)
        image[:, mask] = color[:, None]
        boxes.append(_tight_box(mask))
        labels.append(label)

    return Scene(
        image=image.astype(np.float32),
        boxes=np.stack(boxes).astype(np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        index=index,
        hue_bucket=bucket,
    )


def flip_scene(scene: Scene) -> Scene:
    """Mirror a scene horizontally, boxes included."""
    width = scene.image.shape[2]
    boxes = scene.boxes.copy()
    boxes[:, 0] = width - scene.boxes[:, 2]
    boxes[:, 2] = width - scene.boxes[:, 0]
    return Scene(
        image=np.ascontiguousarray(scene.image[:, :, ::-1]),
        boxes=boxes,
        labels=scene.labels.copy(),
        index=scene.index,
        hue_bucket=scene.hue_bucket,
    )


class SyntheticDataset:
    """
    Indexable view over generated scenes.

    offset shifts every index, so the evaluation split can be a disjoint
    range of the same generator.
    """

    def __init__(self, spec: SceneSpec, num_images: Optional[int] = None, offset: int = 0):
        self.spec = spec
        self.num_images = spec.num_images if num_images is None else num_images
        self.offset = offset
        self._cache: dict[int, Scene] = {}

    def __len__(self) -> int:
        return self.num_images

    def __getitem__(self, i: int) -> Scene:
        if not 0 <= i < self.num_images:
            raise IndexError(i)
        if i not in self._cache:
            self._cache[i] = generate_scene(self.spec, self.offset + i)
        return self._cache[i]

    def __iter__(self) -> Iterator[Scene]:
        for i in range(len(self)):
            yield self[i]

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def category_names(self) -> list[str]:
        names = []
        for label in range(1, self.spec.num_classes + 1):
            shape, bucket = glyph_for_label(label, self.spec)
            names.append(SHAPES[shape] if bucket is None else f"{SHAPES[shape]}_{('cool', 'warm')[bucket]}")
        return names


def generate_scenes(spec: SceneSpec, indices: Sequence[int], workers: int = 1) -> list[Scene]:
    """Render many scenes; results keep the order of indices whatever the worker count."""
    if workers <= 1:
        return [generate_scene(spec, i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: generate_scene(spec, i), indices))


def require_non_empty(dataset) -> None:
    if len(dataset) == 0:
        raise DatasetError("dataset is empty")
