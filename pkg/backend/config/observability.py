"""
Observability utilities: run context and metrics.

This module provides:
- Context-variable run storage (run id, command, seed, mode, variant) for logging
- Prometheus-style in-process metrics collection
- A timing decorator feeding histogram metrics
- Export of the collector as a Prometheus text file next to command output
"""

import contextvars
import time
import uuid
from dataclasses import dataclass, field
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Union

import numpy as np
import structlog

logger = structlog.get_logger(__name__)

# Context variables for run-scoped data
_run_context: contextvars.ContextVar[Dict[str, Any]] = contextvars.ContextVar("run_context", default={})


@dataclass
class RunContext:
    """Run context data attached to every log line."""

    run_id: str = ""
    command: str = ""
    seed: int = 0
    mode: str = ""
    variant: str = ""


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


def set_run_context(
    run_id: str = "",
    command: str = "",
    seed: Any = None,
    mode: str = "",
    variant: str = "",
    **extra,
) -> None:
    """
    Set the run context for the current execution context.

    This context is included in every log message emitted while the
    command or task runs.
    """
    context = {
        "run_id": run_id or new_run_id(),
        "command": command,
        "seed": seed,
        "mode": mode,
        "variant": variant,
        **extra,
    }
    # Filter out empty values (seed 0 is a real value)
    context = {k: v for k, v in context.items() if v is not None and v != ""}
    _run_context.set(context)


def get_run_context() -> Dict[str, Any]:
    """Get the current run context."""
    return _run_context.get()


def clear_run_context() -> None:
    """Clear the run context."""
    _run_context.set({})


def bind_context(**kwargs) -> None:
    """Add additional context to the current run context."""
    context = _run_context.get().copy()
    context.update(kwargs)
    _run_context.set(context)


@dataclass
class MetricsCollector:
    """Simple metrics collector for observability."""

    counters: Dict[str, int] = field(default_factory=dict)
    histograms: Dict[str, list] = field(default_factory=dict)
    gauges: Dict[str, float] = field(default_factory=dict)
    max_observations: int = 1000

    def inc(self, name: str, value: int = 1, labels: Dict[str, str] = None) -> None:
        """Increment a counter."""
        key = self._make_key(name, labels)
        self.counters[key] = self.counters.get(key, 0) + value

    def observe(self, name: str, value: float, labels: Dict[str, str] = None) -> None:
        """Record a histogram observation."""
        key = self._make_key(name, labels)
        if key not in self.histograms:
            self.histograms[key] = []
        self.histograms[key].append(value)
        if len(self.histograms[key]) > self.max_observations:
            self.histograms[key] = self.histograms[key][-self.max_observations :]

    def set_gauge(self, name: str, value: float, labels: Dict[str, str] = None) -> None:
        """Set a gauge value."""
        key = self._make_key(name, labels)
        self.gauges[key] = value

    def reset(self, name: str, labels: Dict[str, str] = None) -> None:
        """Drop every observation recorded under a histogram key."""
        self.histograms.pop(self._make_key(name, labels), None)

    def _make_key(self, name: str, labels: Dict[str, str] = None) -> str:
        """Create a metric key from name and labels."""
        if not labels:
            return name
        label_str = ",".join(f'{k}="{v}"' for k, v in sorted(labels.items()))
        return f"{name}{{{label_str}}}"

    def summary(self, name: str, labels: Dict[str, str] = None) -> Dict[str, float]:
        """count/mean/std/min/max/p50/p90 of one histogram."""
        values = np.asarray(self.histograms.get(self._make_key(name, labels), []), dtype=np.float64)
        if values.size == 0:
            return {"count": 0, "mean": 0.0, "std": 0.0, "min": 0.0, "max": 0.0, "p50": 0.0, "p90": 0.0}
        return {
            "count": int(values.size),
            "mean": float(values.mean()),
            "std": float(values.std()),
            "min": float(values.min()),
            "max": float(values.max()),
            "p50": float(np.percentile(values, 50)),
            "p90": float(np.percentile(values, 90)),
        }

    def to_prometheus_format(self) -> str:
        """Export metrics in Prometheus text format."""
        lines = []

        for key, value in self.counters.items():
            lines.append(f"# TYPE {key.split('{')[0]} counter")
            lines.append(f"{key} {value}")

        # Histograms (simplified - just count and sum)
        for key, values in self.histograms.items():
            base_name = key.split("{")[0]
            labels = key[len(base_name) :] if "{" in key else ""
            if values:
                lines.append(f"# TYPE {base_name} histogram")
                lines.append(f"{base_name}_count{labels} {len(values)}")
                lines.append(f"{base_name}_sum{labels} {sum(values)}")

        for key, value in self.gauges.items():
            lines.append(f"# TYPE {key.split('{')[0]} gauge")
            lines.append(f"{key} {value}")

        return "\n".join(lines)


# Global metrics collector
metrics = MetricsCollector()


def timed(metric_name: str, labels: Dict[str, str] = None):
    """
    Decorator to measure function execution time.

    Usage:
        @timed("train_iteration_seconds", {"mode": "full"})
        def step(...):
            ...
    """

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                duration = time.perf_counter() - start
                metrics.observe(metric_name, duration, labels)

        return wrapper

    return decorator


METRICS_FILE = "metrics.prom"


def write_prometheus(directory: Union[str, Path], collector: MetricsCollector = None) -> Path:
    """Write the collector (the global one by default) to <directory>/metrics.prom."""
    collector = collector if collector is not None else metrics
    path = Path(directory) / METRICS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(collector.to_prometheus_format() + "\n", encoding="utf-8")
    logger.debug("metrics_exported", path=str(path))
    return path
