"""
Tests for experiment configuration.
"""

import pytest

from detection.exceptions import ConfigError
from detection.experiment import (
    ExperimentConfig,
    GcaConfig,
    RpnConfig,
    SceneSpec,
    load_config,
    parse_pool_size,
    save_config,
)


class TestSerialization:
    def test_json_round_trip(self, tmp_path, tiny_config):
        """Test save/load equality, tuples included."""
        path = tmp_path / "cfg.json"
        save_config(tiny_config, path)
        loaded = load_config(path)
        assert loaded == tiny_config
        assert loaded.backbone.widths == (4, 8, 8, 8)

    @pytest.mark.parametrize(
        "data",
        [
            {"gca": {"pool": [8, 8]}},
            {"epoch": 3},
            {"gca": [1, 2]},
            {"dataset": {"image_size": 64}},
        ],
    )
    def test_rejects_unknown_or_malformed(self, data):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_invalid_json(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json("{not json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")


class TestValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"pool_size": (12, 16)},
            {"reduction": 3},
            {"variant": "fc3"},
            {"mode": "attention"},
            {"num_classes": 0},
        ],
    )
    def test_gca_section(self, kwargs):
        with pytest.raises(ConfigError):
            GcaConfig(**kwargs)

    def test_image_size_divisible_by_32(self):
        with pytest.raises(ConfigError):
            SceneSpec(image_size=(48, 64))

    def test_recal_layer(self):
        with pytest.raises(ConfigError):
            RpnConfig(recal_layer="attention")

    @pytest.mark.parametrize("epochs", [0, -2])
    def test_epochs_at_least_one(self, epochs):
        """Test ConfigError instead of an empty training run."""
        with pytest.raises(ConfigError, match="epochs"):
            ExperimentConfig().with_overrides(epochs=epochs)

    def test_class_count_must_agree(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(gca=GcaConfig(num_classes=4))


class TestOverrides:
    def test_reduction_alias_and_none(self):
        """Test the r alias and that None leaves values alone."""
        cfg = ExperimentConfig().with_overrides(r=16, mode=None)
        assert cfg.gca.reduction == 16
        assert cfg.gca.mode == "full"

    def test_num_classes_reaches_both_sections(self):
        cfg = ExperimentConfig().with_overrides(num_classes=4, contextual_mode=True)
        assert cfg.gca.num_classes == 4 and cfg.dataset.num_classes == 4
        assert cfg.dataset.contextual_mode

    def test_lr_and_top_level(self):
        cfg = ExperimentConfig().with_overrides(lr=0.05, epochs=3, rpn_recalibrate=True, pool_size=[8, 8])
        assert cfg.optimizer.lr == 0.05
        assert cfg.epochs == 3 and cfg.rpn_recalibrate
        assert cfg.gca.pool_size == (8, 8)

    def test_scene_seed_reaches_dataset_only(self):
        cfg = ExperimentConfig().with_overrides(scene_seed=7)
        assert cfg.dataset.seed == 7
        assert cfg.seed == 0

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().with_overrides(gca=None, colour="red")

    def test_override_validation_runs(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().with_overrides(pool_size=(10, 10))


@pytest.mark.parametrize("text,expected", [("16x16", (16, 16)), ("64X96", (64, 96))])
def test_parse_pool_size(text, expected):
    assert parse_pool_size(text) == expected


def test_parse_pool_size_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_pool_size("sixteen")
