"""
File-backed datasets: PPM (P6) images with COCO-format annotations.

Implements:
- read_ppm / write_ppm for binary 8-bit RGB portable pixmaps
- export_coco: write scenes as images/*.ppm plus annotations.json
- CocoDataset: read them back (bbox is [x, y, w, h] in the JSON)
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import structlog

from detection.exceptions import DatasetError
from detection.synthetic import Scene

logger = structlog.get_logger(__name__)

ANNOTATION_FILE = "annotations.json"
IMAGE_DIR = "images"


# ========================================
# PPM
# ========================================


def write_ppm(path, image: np.ndarray) -> None:
    """Write a [3, H, W] image in [0, 1] as a P6 pixmap."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DatasetError(f"PPM images must be [3, H, W], got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated PPM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """
    Read a P6 pixmap into a float32 [3, H, W] image in [0, 1].

    Raises:
        DatasetError: for other formats, 16-bit rasters or truncated files
    """
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PPM header") from exc
    if not 0 < maxval < 256:
        raise DatasetError(f"{path}: only 8-bit PPM rasters are supported (maxval {maxval})")
    raster = data[offset : offset + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise DatasetError(f"{path}: truncated raster ({len(raster)} of {3 * w * h} bytes)")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval))


# ========================================
# COCO annotations
# ========================================


def export_coco(scenes: Iterable[Scene], out_dir, category_names: Sequence[str]) -> Path:
    """
    Write scenes as PPM images plus one COCO annotation file.

    Returns:
        path of the annotation file
    """
    out_dir = Path(out_dir)
    (out_dir / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for scene in scenes:
        image_id = int(scene.index)
        file_name = f"{IMAGE_DIR}/{image_id:06d}.ppm"
        write_ppm(out_dir / file_name, scene.image)
        h, w = scene.image_size
        images.append({"id": image_id, "file_name": file_name, "width": int(w), "height": int(h)})
        for box, label in zip(scene.boxes, scene.labels):
            x1, y1, x2, y2 = (float(v) for v in box)
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": image_id,
                    "category_id": int(label),
                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                    "area": (x2 - x1) * (y2 - y1),
                    "iscrowd": 0,
                }
            )
    categories = [{"id": i + 1, "name": name} for i, name in enumerate(category_names)]
    path = out_dir / ANNOTATION_FILE
    path.write_text(
        json.dumps({"images": images, "annotations": annotations, "categories": categories}, indent=2),
        encoding="utf-8",
    )
    logger.info("coco_exported", path=str(path), images=len(images), annotations=len(annotations))
    return path


class CocoDataset:
    """
    Scenes read from a COCO annotation file with PPM images.

    Category ids must be 1..K; images are resolved relative to the
    annotation file's directory.
    """

    def __init__(self, annotation_path):
        self.annotation_path = Path(annotation_path)
        try:
            doc = json.loads(self.annotation_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"Cannot read COCO annotations {annotation_path}: {exc}") from exc
        for key in ("images", "annotations", "categories"):
            if not isinstance(doc.get(key), list):
                raise DatasetError(f"COCO annotations need a {key!r} array")
        self.categories = sorted(doc["categories"], key=lambda c: c["id"])
        ids = [c["id"] for c in self.categories]
        if ids != list(range(1, len(ids) + 1)):
            raise DatasetError(f"COCO category ids must be 1..K, got {ids}")
        self.images = sorted(doc["images"], key=lambda im: im["id"])
        self._annotations: dict[int, list[dict]] = {im["id"]: [] for im in self.images}
        for ann in doc["annotations"]:
            if ann.get("image_id") not in self._annotations:
                raise DatasetError(f"annotation {ann.get('id')} references unknown image {ann.get('image_id')}")
            if ann.get("category_id") not in ids:
                raise DatasetError(f"annotation {ann.get('id')} has unknown category {ann.get('category_id')}")
            self._annotations[ann["image_id"]].append(ann)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Scene:
        info = self.images[i]
        image = read_ppm(self.annotation_path.parent / info["file_name"])
        anns = [a for a in self._annotations[info["id"]] if not a.get("iscrowd", 0)]
        boxes = np.array(
            [[x, y, x + w, y + h] for x, y, w, h in (a["bbox"] for a in anns)], dtype=np.float64
        ).reshape(-1, 4)
        labels = np.array([a["category_id"] for a in anns], dtype=np.int64)
        return Scene(image=image, boxes=boxes, labels=labels, index=int(info["id"]))

    def __iter__(self) -> Iterator[Scene]:
        for i in range(len(self)):
            yield self[i]

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    @property
    def category_names(self) -> list[str]:
        return [c["name"] for c in self.categories]
