"""
Parameter census, multiply-accumulates and detect() latency per head mode.

Usage:
    python manage.py bench
    python manage.py bench --runs 50 --warmup 5
"""

from pathlib import Path

from config.observability import write_prometheus
from detection.cli import ExperimentCommand
from detection.cost import COST_MODES, cost_report
from detection.reports import cost_table, write_json


class Command(ExperimentCommand):
    help = "Compare baseline, full and lightweight heads on one fixed input"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--runs", type=int, help="Timed runs (default: GCA_BENCH_RUNS)")
        parser.add_argument("--warmup", type=int, help="Warmup runs (default: GCA_BENCH_WARMUP)")
        parser.add_argument("--modes", nargs="+", choices=COST_MODES, default=list(COST_MODES))

    def run(self, cfg, out_dir, **options):
        report = cost_report(cfg, options["modes"], warmup=options.get("warmup"), runs=options.get("runs"))
        target = write_json(report, Path(out_dir) / "cost.json")
        exported = write_prometheus(out_dir)
        self.emit(cost_table(report))
        self.emit(f"\nCost report written to {target}, latency histograms to {exported}", "SUCCESS")
