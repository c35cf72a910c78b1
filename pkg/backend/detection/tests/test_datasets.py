"""
Tests for PPM images and COCO-format datasets.
"""

import json

import numpy as np
import pytest

from detection.datasets import ANNOTATION_FILE, CocoDataset, export_coco, read_ppm, write_ppm
from detection.exceptions import DatasetError
from detection.experiment import SceneSpec
from detection.synthetic import SyntheticDataset, generate_scene


class TestPpm:
    """Binary P6 reading and writing."""

    def test_round_trip_within_quantization(self, tmp_path, rng):
        """Test that pixels come back within half an 8-bit step."""
        image = rng.uniform(0, 1, (3, 5, 7))
        write_ppm(tmp_path / "a.ppm", image)
        back = read_ppm(tmp_path / "a.ppm")
        assert back.shape == (3, 5, 7) and back.dtype == np.float32
        np.testing.assert_allclose(back, image, atol=0.5 / 255 + 1e-6)

    def test_header_comments_are_skipped(self, tmp_path):
        """Test a header with a comment line and a smaller maxval."""
        raster = bytes([0, 5, 10] * 2)
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n10\n" + raster)
        image = read_ppm(tmp_path / "c.ppm")
        np.testing.assert_allclose(image[:, 0, 0], [0.0, 0.5, 1.0])

    @pytest.mark.parametrize(
        "payload",
        [
            b"P3\n1 1\n255\n0 0 0\n",
            b"P6\n1 1\n65535\n" + bytes(6),
            b"P6\n2 2\n255\n" + bytes(5),
            b"P6\n2",
        ],
        ids=["ascii", "16-bit", "truncated-raster", "truncated-header"],
    )
    def test_rejects_unsupported_files(self, tmp_path, payload):
        """Test DatasetError for foreign or damaged files."""
        path = tmp_path / "bad.ppm"
        path.write_bytes(payload)
        with pytest.raises(DatasetError):
            read_ppm(path)

    def test_write_rejects_channel_last(self, tmp_path):
        with pytest.raises(DatasetError):
            write_ppm(tmp_path / "x.ppm", np.zeros((4, 4, 3)))


class TestCoco:
    """Export and re-import of annotated scenes."""

    def test_export_then_load(self, tmp_path):
        """Test that boxes, labels and categories survive the file format."""
        spec = SceneSpec(num_images=4)
        synthetic = SyntheticDataset(spec)
        path = export_coco(synthetic, tmp_path / "coco", synthetic.category_names)
        assert path.name == ANNOTATION_FILE
        coco = CocoDataset(path)
        assert len(coco) == 4
        assert coco.num_classes == 3
        assert coco.category_names == synthetic.category_names
        for original, loaded in zip(synthetic, coco):
            np.testing.assert_allclose(loaded.boxes, original.boxes)
            np.testing.assert_array_equal(loaded.labels, original.labels)
            np.testing.assert_allclose(loaded.image, original.image, atol=0.5 / 255 + 1e-6)

    def test_bbox_is_xywh(self, tmp_path):
        """Test the COCO [x, y, w, h] convention in the written JSON."""
        scene = generate_scene(SceneSpec(), 0)
        path = export_coco([scene], tmp_path, ["a", "b", "c"])
        doc = json.loads(path.read_text())
        x1, y1, x2, y2 = scene.boxes[0]
        assert doc["annotations"][0]["bbox"] == [x1, y1, x2 - x1, y2 - y1]

    def test_crowd_annotations_are_dropped(self, tmp_path):
        scene = generate_scene(SceneSpec(objects_per_image=2), 0)
        path = export_coco([scene], tmp_path, ["a", "b", "c"])
        doc = json.loads(path.read_text())
        doc["annotations"][0]["iscrowd"] = 1
        path.write_text(json.dumps(doc))
        assert len(CocoDataset(path)[0].boxes) == 1

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda doc: doc.pop("images"),
            lambda doc: doc["categories"].__setitem__(0, {"id": 5, "name": "x"}),
            lambda doc: doc["annotations"][0].__setitem__("image_id", 999),
            lambda doc: doc["annotations"][0].__setitem__("category_id", 42),
        ],
        ids=["missing-images", "category-ids", "unknown-image", "unknown-category"],
    )
    def test_malformed_annotations(self, tmp_path, mutate):
        """Test DatasetError for structural problems in the JSON."""
        path = export_coco([generate_scene(SceneSpec(), 0)], tmp_path, ["a", "b", "c"])
        doc = json.loads(path.read_text())
        mutate(doc)
        path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError):
            CocoDataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            CocoDataset(tmp_path / "nope.json")
