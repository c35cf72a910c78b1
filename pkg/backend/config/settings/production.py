"""
Production settings for worker hosts.

Usage:
    Set DJANGO_SETTINGS_MODULE=config.settings.production on machines that
    run ablation workers (`celery -A config worker -Q ablation`).
"""

from .base import *  # noqa: F401,F403

# Force DEBUG off in production
DEBUG = False

# Require SECRET_KEY to be set (fail-fast if not configured)
if SECRET_KEY == "changeme":  # noqa: F405
    raise ValueError("DJANGO_SECRET_KEY must be set in production")

# Worker logs are shipped as JSON
LOG_FORMAT = "json"

configure_structlog(LOG_FORMAT, LOG_LEVEL)  # noqa: F405
