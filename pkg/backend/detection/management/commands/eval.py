"""
Evaluate a checkpoint.

Usage:
    python manage.py eval --checkpoint runs/train/checkpoint_final.gcac
    python manage.py eval --checkpoint ckpt.gcac --dataset data/annotations.json
"""

from pathlib import Path

from django.core.management.base import CommandError

from detection.checkpoint import load_checkpoint
from detection.cli import ExperimentCommand
from detection.datasets import CocoDataset
from detection.evaluation import evaluate
from detection.model import build_model
from detection.reports import metrics_table, write_json
from detection.synthetic import SyntheticDataset


class Command(ExperimentCommand):
    help = "Evaluate a checkpoint: AP over IoU 0.50:0.95, AP50/AP75, size buckets, per-class accuracy"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--checkpoint", type=str, required=True, help="Checkpoint (.gcac) to evaluate")
        parser.add_argument("--dataset", type=str, help="COCO annotation file; default is the synthetic eval split")
        parser.add_argument("--images", type=int, help="Number of synthetic evaluation scenes")

    def run(self, cfg, out_dir, **options):
        path = Path(options["checkpoint"])
        if not path.exists():
            raise CommandError(f"Checkpoint {path} does not exist")
        stored = load_checkpoint(path)
        # the config saved with the weights wins unless one is given explicitly
        if stored.config is not None and not options.get("config"):
            cfg = stored.config
        model = build_model(cfg)
        load_checkpoint(path, model)
        if options.get("dataset"):
            dataset = CocoDataset(options["dataset"])
        else:
            dataset = SyntheticDataset(
                cfg.dataset, num_images=options.get("images") or cfg.eval_images, offset=cfg.eval_offset
            )
        report = evaluate(model, dataset)
        target = write_json(report, Path(out_dir) / "metrics.json")
        self.emit(metrics_table(report))
        self.emit(f"\nMetrics written to {target}", "SUCCESS")
