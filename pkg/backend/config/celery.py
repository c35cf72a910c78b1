import os

import structlog
from celery import Celery
from celery.signals import task_failure, task_success
from kombu import Exchange, Queue

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings.local")

logger = structlog.get_logger(__name__)

app = Celery("config")
app.config_from_object("django.conf:settings", namespace="CELERY")

# Ablation cells go to their own queue so a long grid never starves other work
default_exchange = Exchange("default", type="direct")
ablation_exchange = Exchange("ablation", type="direct")

app.conf.task_queues = (
    Queue("default", default_exchange, routing_key="default"),
    Queue("ablation", ablation_exchange, routing_key="ablation"),
)
app.conf.task_routes = {"detection.tasks.run_ablation_cell": {"queue": "ablation"}}

app.autodiscover_tasks()


def _task_name(sender) -> str:
    return sender.name if sender else "unknown"


@task_success.connect
def on_task_success(sender=None, result=None, **kwargs):
    """Log successful task completion and count it."""
    from config.observability import metrics

    metrics.inc("celery_tasks_total", labels={"task": _task_name(sender), "status": "success"})
    logger.info(
        "task_success",
        task=_task_name(sender),
        ap=result.get("ap") if isinstance(result, dict) else None,
    )


@task_failure.connect
def on_task_failure(sender=None, task_id=None, exception=None, traceback=None, **kwargs):
    """Log task failure and count it."""
    from config.observability import metrics

    metrics.inc("celery_tasks_total", labels={"task": _task_name(sender), "status": "failure"})
    logger.error(
        "task_failure",
        task=_task_name(sender),
        task_id=task_id,
        exception=str(exception),
    )
