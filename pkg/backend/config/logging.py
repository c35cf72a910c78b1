"""
Structured logging configuration with run context binding.

This module provides:
- Structlog processors for run context (run_id, command, seed, mode, variant)
- Service identification on every event
- JSON rendering for files and pipelines, console rendering for terminals
"""

import logging
from typing import Any

import numpy as np
import structlog
from django.conf import settings


def add_run_context(logger, method_name: str, event_dict: dict) -> dict:
    """
    Structlog processor that adds the active run context.

    Adds: run_id, command, seed, mode, variant (whichever are set)
    """
    from config.observability import get_run_context

    context = get_run_context()
    if context:
        for key, value in context.items():
            event_dict.setdefault(key, value)
    return event_dict


def add_service_info(logger, method_name: str, event_dict: dict) -> dict:
    """
    Structlog processor that adds service identification info.
    """
    event_dict["service"] = getattr(settings, "SERVICE_NAME", "gca-rcnn")
    event_dict["environment"] = getattr(settings, "ENVIRONMENT", "development")
    return event_dict


def to_builtin(value: Any) -> Any:
    """Convert numpy scalars and arrays so the JSON renderer can serialize them."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def numpy_values(logger, method_name: str, event_dict: dict) -> dict:
    """Structlog processor that makes numpy values JSON-safe."""
    for key, value in event_dict.items():
        event_dict[key] = to_builtin(value)
    return event_dict


def configure_structlog(log_format: str = "json", log_level: str = "INFO"):
    """
    Configure structlog with all processors.

    Called from the settings modules with their LOG_FORMAT and LOG_LEVEL;
    "console" switches the final renderer to the human-readable one.
    """
    renderer = (
        structlog.dev.ConsoleRenderer() if log_format == "console" else structlog.processors.JSONRenderer()
    )
    processors = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.add_log_level,
        add_service_info,
        add_run_context,
        numpy_values,
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
    ]
    if log_format != "console":
        processors.append(structlog.processors.EventRenamer("message"))
    processors.append(renderer)

    level = getattr(logging, log_level.upper(), logging.INFO)
    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(),
        cache_logger_on_first_use=False,
    )


def get_logger(name: str = None):
    """
    Get a structlog logger with the given name.

    Usage:
        logger = get_logger(__name__)
        logger.info("epoch_complete", epoch=3, loss=0.41)
    """
    return structlog.get_logger(name)
