# conftest.py
import numpy as np
import pytest
from django.test.utils import override_settings

from config.observability import clear_run_context
from detection.tensor import get_default_dtype, set_default_dtype


@pytest.fixture(autouse=True)
def test_settings_and_reset(tmp_path):
    """
    Autouse fixture: run artifacts go to a per-test directory, and the
    default dtype and run context never leak between tests.
    """
    dtype = get_default_dtype()
    with override_settings(GCA_OUTPUT_DIR=tmp_path / "runs"):
        yield
    set_default_dtype(dtype)
    clear_run_context()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    """A detector small enough to train for a few steps inside a unit test."""
    from detection.experiment import ExperimentConfig

    data = {
        "backbone": {"widths": [4, 8, 8, 8]},
        "rpn": {"pre_nms_top": 32, "post_nms_top": 16, "batch_size": 32},
        "gca": {"fc_dim": 16, "fusion_dim": 8, "roi_batch_size": 8, "num_classes": 3},
        "optimizer": {"lr": 0.005, "lr_steps": [1]},
        "dataset": {"image_size": [64, 64], "num_images": 4, "num_classes": 3, "min_object_size": 12, "max_object_size": 24},
        "epochs": 2,
        "eval_images": 2,
        "log_every": 1,
    }
    return ExperimentConfig.from_dict(data)
