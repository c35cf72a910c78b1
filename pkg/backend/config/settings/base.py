import os
from pathlib import Path

from sentry_sdk import init as sentry_init
from sentry_sdk.integrations.celery import CeleryIntegration
from sentry_sdk.integrations.django import DjangoIntegration

from config.logging import configure_structlog

BASE_DIR = Path(__file__).resolve().parents[2]

SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "changeme")
DEBUG = os.getenv("DJANGO_DEBUG", "true").lower() == "true"
ALLOWED_HOSTS: list[str] = []

INSTALLED_APPS = [
    "django.contrib.contenttypes",
    # Project apps
    "detection",
]

# The detection stack is a command-line and worker application: no models, no views
DATABASES: dict = {}
DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

# Experiment defaults
SERVICE_NAME = "gca-rcnn"
GCA_OUTPUT_DIR = Path(os.getenv("GCA_OUTPUT_DIR", str(BASE_DIR / "runs")))
GCA_DEFAULT_SEED = int(os.getenv("GCA_DEFAULT_SEED", "0"))
GCA_DEFAULT_CONFIG = os.getenv("GCA_DEFAULT_CONFIG", "")  # path to an ExperimentConfig JSON file
GCA_STRICT_CHECKPOINTS = os.getenv("GCA_STRICT_CHECKPOINTS", "true").lower() == "true"
GCA_BENCH_WARMUP = int(os.getenv("GCA_BENCH_WARMUP", "5"))
GCA_BENCH_RUNS = int(os.getenv("GCA_BENCH_RUNS", "50"))
GCA_GRADCHECK_TOLERANCE = float(os.getenv("GCA_GRADCHECK_TOLERANCE", "1e-4"))

# Structlog logging configuration with run context
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = os.getenv("LOG_FORMAT", "json")  # json or console
ENVIRONMENT = os.getenv("ENVIRONMENT", "development")

configure_structlog(LOG_FORMAT, LOG_LEVEL)

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "WARNING",
    },
}

SENTRY_DSN = os.getenv("SENTRY_DSN")
SENTRY_ENVIRONMENT = os.getenv("SENTRY_ENVIRONMENT", ENVIRONMENT)
if SENTRY_DSN:
    sentry_init(
        dsn=SENTRY_DSN,
        integrations=[DjangoIntegration(), CeleryIntegration()],
        traces_sample_rate=float(os.getenv("SENTRY_TRACES_SAMPLE_RATE", "0.0")),
        environment=SENTRY_ENVIRONMENT,
        send_default_pii=False,
    )

# Celery
CELERY_BROKER_URL = f"amqp://{os.getenv('RABBITMQ_USER', 'guest')}:{os.getenv('RABBITMQ_PASSWORD', 'guest')}@{os.getenv('RABBITMQ_HOST', 'rabbitmq')}:{os.getenv('RABBITMQ_PORT', '5672')}//"
CELERY_RESULT_BACKEND = os.getenv("CELERY_RESULT_BACKEND", "rpc://")
CELERY_ACCEPT_CONTENT = ["json"]
CELERY_TASK_SERIALIZER = "json"
CELERY_RESULT_SERIALIZER = "json"
CELERY_TIMEZONE = TIME_ZONE

# Celery reliability settings
CELERY_TASK_ACKS_LATE = True  # Acknowledge after task completes (not before)
CELERY_TASK_REJECT_ON_WORKER_LOST = True  # Reject task if worker dies
CELERY_WORKER_PREFETCH_MULTIPLIER = 1  # One training cell per worker at a time

# Task tracking
CELERY_TASK_TRACK_STARTED = True
CELERY_TASK_TIME_LIMIT = int(os.getenv("CELERY_TASK_TIME_LIMIT", "7200"))  # a full 30-epoch cell
CELERY_TASK_SOFT_TIME_LIMIT = int(os.getenv("CELERY_TASK_SOFT_TIME_LIMIT", "7000"))
CELERY_RESULT_EXPIRES = 86400

CELERY_TASK_DEFAULT_QUEUE = "default"
CELERY_TASK_DEFAULT_EXCHANGE = "default"
CELERY_TASK_DEFAULT_ROUTING_KEY = "default"
