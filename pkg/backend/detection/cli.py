"""
Shared plumbing for the detection management commands.

Every command accepts the same experiment flags, resolves them into an
ExperimentConfig (settings default config file, then --config, then flag
overrides), binds the run context for logging and turns DetectionError into
a one-line CommandError.
"""

from __future__ import annotations

import contextlib
from pathlib import Path
from typing import Optional

import numpy as np
import structlog
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from config.observability import clear_run_context, new_run_id, set_run_context
from detection.exceptions import DetectionError
from detection.experiment import MODES, VARIANTS, ExperimentConfig, load_config, parse_pool_size
from detection.tensor import default_dtype

logger = structlog.get_logger(__name__)


def add_experiment_arguments(parser) -> None:
    parser.add_argument("--config", type=str, help="ExperimentConfig JSON file")
    parser.add_argument("--seed", type=int, help="Run seed (default: GCA_DEFAULT_SEED)")
    parser.add_argument("--mode", choices=MODES, help="Head mode")
    parser.add_argument("--variant", choices=VARIANTS, help="Attention placement")
    parser.add_argument("--pool-size", type=str, help="Global context pool size as MxN (e.g. 16x16)")
    parser.add_argument("--reduction", type=int, help="Squeeze-excitation reduction ratio r")
    parser.add_argument("--rpn-recal", action="store_true", help="Enable RPN feature recalibration")
    parser.add_argument("--out", type=str, help="Output directory (default: GCA_OUTPUT_DIR)")
    parser.add_argument("--f64", action="store_true", help="Run in 64-bit floating point")


def resolve_config(options: dict) -> ExperimentConfig:
    path = options.get("config") or getattr(settings, "GCA_DEFAULT_CONFIG", "")
    cfg = load_config(path) if path else ExperimentConfig()
    seed = options.get("seed")
    if seed is None and not options.get("config"):
        seed = getattr(settings, "GCA_DEFAULT_SEED", None)
    return cfg.with_overrides(
        seed=seed,
        mode=options.get("mode"),
        variant=options.get("variant"),
        pool_size=parse_pool_size(options["pool_size"]) if options.get("pool_size") else None,
        reduction=options.get("reduction"),
        rpn_recalibrate=True if options.get("rpn_recal") else None,
    )


def output_dir(options: dict, command: str) -> Path:
    if options.get("out"):
        return Path(options["out"])
    return Path(settings.GCA_OUTPUT_DIR) / command


class ExperimentCommand(BaseCommand):
    """
    Base class for the detection commands.

    Subclasses implement run(cfg, out_dir, **options) instead of handle().
    """

    command_name = ""

    def add_arguments(self, parser):
        add_experiment_arguments(parser)

    def run(self, cfg: ExperimentConfig, out_dir: Path, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        name = self.command_name or self.__module__.rsplit(".", 1)[-1]
        try:
            cfg = resolve_config(options)
            set_run_context(
                run_id=new_run_id(),
                command=name,
                seed=cfg.seed,
                mode=cfg.gca.mode,
                variant=cfg.gca.variant,
            )
            dtype = default_dtype(np.float64) if options.get("f64") else contextlib.nullcontext()
            with dtype:
                self.run(cfg, output_dir(options, name), **options)
        except DetectionError as exc:
            logger.error("command_failed", error=str(exc), error_type=type(exc).__name__)
            raise CommandError(str(exc)) from exc
        finally:
            clear_run_context()

    def emit(self, text: str, style: Optional[str] = None) -> None:
        if style:
            text = getattr(self.style, style)(text)
        self.stdout.write(text)
