"""
Exception hierarchy for the detection stack.

Every error raised deliberately by the tensor engine, the model, or the
experiment harness derives from DetectionError so that management commands
can translate it into a single CommandError line.
"""


class DetectionError(Exception):
    """Base exception for all detection errors."""

    pass


class ShapeError(DetectionError, ValueError):
    """Raised when tensor shapes, channel counts or spatial extents disagree."""

    pass


class GradientError(DetectionError):
    """Raised for invalid differentiation requests (non-scalar backward, missing grads)."""

    pass


class ConfigError(DetectionError, ValueError):
    """Raised for invalid configuration values, unknown keys or unknown grid keys."""

    pass


class CheckpointError(DetectionError):
    """Base exception for checkpoint persistence errors."""

    pass


class CheckpointFormatError(CheckpointError):
    """Raised when a checkpoint has a bad magic, version, CRC or is truncated."""

    pass


class UnknownParameterError(CheckpointError):
    """Raised by strict loads when checkpoint and model parameter paths differ."""

    pass


class DatasetError(DetectionError):
    """Raised for empty datasets or malformed annotation/image files."""

    pass


class NonFiniteLossError(DetectionError):
    """
    Raised when the training loss stops being finite.

    Carries the diagnostic dump (iteration and per-parameter grad norms) so the
    caller can persist it next to the run artifacts.
    """

    def __init__(self, message: str, iteration: int, grad_norms: dict):
        super().__init__(message)
        self.iteration = iteration
        self.grad_norms = grad_norms
