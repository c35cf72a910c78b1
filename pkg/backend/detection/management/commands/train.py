"""
Train a detector on the synthetic scenes (or a COCO/PPM dataset).

Usage:
    python manage.py train --mode full --seed 0 --out runs/full
    python manage.py train --config configs/lightweight.json --f64
"""

from detection.cli import ExperimentCommand
from detection.datasets import CocoDataset
from detection.training import train


class Command(ExperimentCommand):
    help = "Train a GCA RCNN detector and write checkpoints plus a per-iteration loss log"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--epochs", type=int, help="Override the number of epochs")
        parser.add_argument("--lr", type=float, help="Override the base learning rate")
        parser.add_argument("--dataset", type=str, help="COCO annotation file to train on instead of synthetic scenes")

    def run(self, cfg, out_dir, **options):
        cfg = cfg.with_overrides(epochs=options.get("epochs"), lr=options.get("lr"))
        dataset = CocoDataset(options["dataset"]) if options.get("dataset") else None
        self.emit(f"Training {cfg.gca.mode}/{cfg.gca.variant} for {cfg.epochs} epochs into {out_dir}")
        result = train(cfg, out_dir, dataset=dataset)
        self.emit(
            f"Done in {result.seconds:.1f}s: {len(result.losses)} iterations, "
            f"final loss {result.losses[-1]:.4f}, checkpoint {result.checkpoint}",
            "SUCCESS",
        )
