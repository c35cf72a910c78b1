from .base import *  # noqa: F401,F403

DEBUG = True

# Celery test settings
CELERY_TASK_ALWAYS_EAGER = True  # Execute tasks synchronously in tests
CELERY_TASK_EAGER_PROPAGATES = True  # Propagate exceptions in eager mode
CELERY_BROKER_URL = "memory://"
CELERY_RESULT_BACKEND = "cache+memory://"

# Short latency runs keep the cost tests fast
GCA_BENCH_WARMUP = 1
GCA_BENCH_RUNS = 3

LOG_LEVEL = "WARNING"

configure_structlog(LOG_FORMAT, LOG_LEVEL)  # noqa: F405
