from .base import *  # noqa: F401,F403

# Human-readable logs on a developer terminal unless overridden
LOG_FORMAT = os.getenv("LOG_FORMAT", "console")  # noqa: F405

configure_structlog(LOG_FORMAT, LOG_LEVEL)  # noqa: F405
