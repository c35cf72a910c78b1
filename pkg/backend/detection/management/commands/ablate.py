"""
Run an ablation grid or a named preset.

Usage:
    python manage.py ablate --grid "mode=baseline,dense_no_attention"
    python manage.py ablate --grid "r=4,8,16" --epochs 2
    python manage.py ablate --preset attention_placement --dispatch
"""

from pathlib import Path

from django.core.management.base import CommandError

from detection.ablation import PRESETS, ablate, parse_grid
from detection.cli import ExperimentCommand
from detection.reports import ablation_table, write_json


class Command(ExperimentCommand):
    help = "Train and evaluate every cell of an ablation grid and print the resulting table"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--grid", type=str, default="", help='Grid such as "mode=baseline,full;r=4,8"')
        parser.add_argument("--preset", choices=sorted(PRESETS), help="Named experiment grid")
        parser.add_argument("--epochs", type=int, help="Epochs per cell")
        parser.add_argument("--dispatch", action="store_true", help="Queue cells to Celery workers")

    def run(self, cfg, out_dir, **options):
        if options.get("preset") and options.get("grid"):
            raise CommandError("Use either --grid or --preset, not both")
        cfg = cfg.with_overrides(epochs=options.get("epochs"))
        grid = None if options.get("preset") else parse_grid(options["grid"])
        report = ablate(cfg, grid, out_dir=out_dir, preset=options.get("preset"), dispatch=options["dispatch"])
        target = write_json(report, Path(out_dir) / report.name / "ablation.json")
        self.emit(ablation_table(report))
        self.emit(f"\n{len(report.rows)} cells written to {target}", "SUCCESS")
