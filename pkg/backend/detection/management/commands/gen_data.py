"""
Write synthetic scenes as PPM images plus a COCO annotation file.

Usage:
    python manage.py gen_data --out data/desk --images 64
    python manage.py gen_data --out data/context --contextual --num-classes 4
"""

from detection.cli import ExperimentCommand
from detection.datasets import export_coco
from detection.synthetic import SyntheticDataset, generate_scenes


class Command(ExperimentCommand):
    help = "Generate a deterministic synthetic dataset in COCO format"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--images", type=int, help="Number of scenes (default: dataset.num_images)")
        parser.add_argument("--offset", type=int, default=0, help="Index of the first scene")
        parser.add_argument("--contextual", action="store_true", help="Label decided by background hue")
        parser.add_argument("--num-classes", type=int, help="Number of object classes")
        parser.add_argument("--workers", type=int, default=1, help="Render threads")

    def run(self, cfg, out_dir, **options):
        cfg = cfg.with_overrides(
            contextual_mode=True if options.get("contextual") else None,
            num_classes=options.get("num_classes"),
        )
        dataset = SyntheticDataset(cfg.dataset, num_images=options.get("images"), offset=options["offset"])
        indices = range(dataset.offset, dataset.offset + len(dataset))
        scenes = generate_scenes(cfg.dataset, indices, workers=options["workers"])
        path = export_coco(scenes, out_dir, dataset.category_names)
        self.emit(f"Wrote {len(scenes)} scenes to {path}", "SUCCESS")
