"""
Finite-difference gradient checks in 64-bit mode.

Usage:
    python manage.py gradcheck --scope ops
    python manage.py gradcheck --scope end_to_end
"""

from pathlib import Path

import numpy as np
from django.core.management.base import CommandError

from detection.cli import ExperimentCommand
from detection.gradcheck import grad_check_suite
from detection.reports import gradcheck_table, write_json
from detection.tensor import default_dtype


class Command(ExperimentCommand):
    help = "Compare analytic gradients against central differences for every op and the full graph"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--scope", choices=["ops", "end_to_end", "all"], default="all")
        parser.add_argument("--tolerance", type=float, help="Max relative error (default: GCA_GRADCHECK_TOLERANCE)")

    def run(self, cfg, out_dir, **options):
        scopes = ["ops", "end_to_end"] if options["scope"] == "all" else [options["scope"]]
        failed = []
        with default_dtype(np.float64):
            for scope in scopes:
                report = grad_check_suite(scope, options.get("tolerance"), seed=cfg.seed)
                write_json(report, Path(out_dir) / f"gradcheck_{scope}.json")
                self.emit(gradcheck_table(report))
                if not report.passed:
                    failed.extend(e.site for e in report.failures())
        if failed:
            raise CommandError(f"Gradient check failed at {len(failed)} sites: {', '.join(failed[:5])}")
        self.emit("All gradient checks passed", "SUCCESS")
