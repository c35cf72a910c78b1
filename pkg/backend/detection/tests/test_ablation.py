"""
Tests for ablation grids, presets and the cell runner.
"""

from pathlib import Path

import pytest

from detection.ablation import (
    GRID_KEYS,
    LATENCY_COLUMN,
    METRIC_COLUMNS,
    PRESETS,
    ablate,
    cell_label,
    columns_for,
    expand_grid,
    parse_grid,
    validate_grid,
)
from detection.exceptions import ConfigError
from detection.experiment import ExperimentConfig, GcaConfig, SceneSpec, load_config
from detection.tasks import run_ablation_cell


class TestGridParsing:
    def test_parse_typed_values(self):
        """Test ints, booleans and MxN pool sizes."""
        grid = parse_grid("mode=baseline,full; r=4,16 ;pool_size=16x16,8x8;rpn_recalibrate=true,0")
        assert grid == {
            "mode": ["baseline", "full"],
            "r": [4, 16],
            "pool_size": [(16, 16), (8, 8)],
            "rpn_recalibrate": [True, False],
        }

    def test_empty_text_is_empty_grid(self):
        assert parse_grid("") == {}

    @pytest.mark.parametrize(
        "text",
        ["lr=0.1,0.2", "mode", "mode=", "mode=attention", "variant=fc3", "r=four", "rpn_recalibrate=maybe", "pool_size=16"],
    )
    def test_invalid_grids(self, text):
        """Test ConfigError for unknown keys, empty lists and bad values."""
        with pytest.raises(ConfigError):
            parse_grid(text)

    def test_validate_accepts_lists_for_pool_size(self):
        assert validate_grid({"pool_size": [[8, 8]]}) == {"pool_size": [(8, 8)]}

    def test_grid_keys(self):
        assert GRID_KEYS == ("mode", "pool_size", "variant", "r", "rpn_recalibrate", "seed")


class TestExpansion:
    def test_cartesian_product_in_key_order(self):
        """Test that the last key varies fastest."""
        cells = expand_grid({"mode": ["baseline", "full"], "r": [4, 8, 16]})
        assert len(cells) == 6
        assert cells[0] == {"mode": "baseline", "r": 4}
        assert cells[1] == {"mode": "baseline", "r": 8}
        assert cells[3] == {"mode": "full", "r": 4}

    def test_empty_grid_has_one_cell(self):
        assert expand_grid({}) == [{}]

    def test_cell_labels(self):
        assert cell_label({}) == "default"
        assert cell_label({"mode": "full", "pool_size": (16, 16), "r": 8}) == "mode-full_pool_size-16x16_r-8"

    def test_columns_depend_only_on_grid(self):
        """Test that the schema is grid keys, metrics and optional latency."""
        assert columns_for({"r": [4]}) == ["r", *METRIC_COLUMNS]
        assert columns_for({}, latency=True) == [*METRIC_COLUMNS, LATENCY_COLUMN]


class TestPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_are_valid(self, name):
        """Test that every preset grid validates and its overrides build configs."""
        preset = PRESETS[name]
        validate_grid(preset.grid)
        for cell in expand_grid(preset.grid):
            if "pool_size" in cell:
                GcaConfig(pool_size=cell["pool_size"])
        if "num_classes" in preset.overrides:
            SceneSpec(contextual_mode=preset.overrides.get("contextual_mode", False), num_classes=preset.overrides["num_classes"])

    def test_preset_shapes(self):
        assert len(expand_grid(PRESETS["attention_placement"].grid)) == 6
        assert len(expand_grid(PRESETS["rpn_recalibration"].grid)) == 4
        assert PRESETS["lightweight"].latency
        assert PRESETS["pool_size"].grid["pool_size"] == [(32, 32), (24, 24), (16, 16), (8, 8)]

    def test_unknown_preset(self, tiny_config):
        with pytest.raises(ConfigError):
            ablate(tiny_config, preset="no_such_preset")


@pytest.mark.integration
class TestAblate:
    """End-to-end grids on the tiny detector."""

    @pytest.fixture
    def quick(self, tiny_config):
        return tiny_config.with_overrides(epochs=1, num_images=2)

    def test_rows_follow_grid_order(self, quick, settings):
        """Test one row per cell with every column present."""
        report = ablate(quick, {"mode": ["baseline", "lightweight"]})
        assert [row["mode"] for row in report.rows] == ["baseline", "lightweight"]
        assert report.columns == ["mode", *METRIC_COLUMNS]
        for row in report.rows:
            assert set(report.columns) <= set(row)
            assert 0.0 <= row["ap"] <= 1.0
        assert report.rows[0]["head_parameters"] < report.rows[1]["head_parameters"]
        assert report.rows[0]["checkpoint"].startswith(str(settings.GCA_OUTPUT_DIR / "custom"))

    def test_empty_grid_single_default_row(self, quick, tmp_path):
        report = ablate(quick, {}, out_dir=tmp_path)
        assert len(report.rows) == 1
        assert (tmp_path / "custom" / "default" / "checkpoint_final.gcac").exists()

    def test_dispatch_matches_inline(self, quick, tmp_path):
        """Test that eager Celery dispatch returns the same metrics."""
        inline = ablate(quick, {"r": [4]}, out_dir=tmp_path / "inline")
        queued = ablate(quick, {"r": [4]}, out_dir=tmp_path / "queued", dispatch=True)
        assert [row["ap"] for row in inline.rows] == [row["ap"] for row in queued.rows]

    def test_task_rebuilds_config(self, quick, tmp_path):
        """Test the Celery task on a plain-dict payload."""
        row = run_ablation_cell.apply(args=(quick.to_dict(), {"pool_size": [8, 8]}, str(tmp_path), False)).get()
        assert row["pool_size"] == [8, 8]
        assert LATENCY_COLUMN not in row

    def test_seed_cells_redraw_scenes(self, quick, tmp_path):
        """Test that each seed cell trains on scenes drawn from its own seed."""
        report = ablate(quick, {"seed": [0, 1]}, out_dir=tmp_path)
        for row in report.rows:
            saved = load_config(Path(row["checkpoint"]).parent / "config.json")
            assert saved.seed == row["seed"]
            assert saved.dataset.seed == row["seed"]

    def test_failing_cell_propagates(self, quick, tmp_path):
        with pytest.raises(ConfigError):
            run_ablation_cell.apply(args=(quick.to_dict(), {"pool_size": [12, 12]}, str(tmp_path), False)).get()

    @pytest.mark.slow
    def test_latency_preset(self, quick, tmp_path):
        """Test the lightweight preset with its latency column."""
        report = ablate(quick, preset="lightweight", out_dir=tmp_path)
        assert report.columns[-1] == LATENCY_COLUMN
        assert all(row[LATENCY_COLUMN] > 0 for row in report.rows)


def _mean_accuracy(row):
    values = [v for v in row["class_accuracy"].values() if v is not None]
    return sum(values) / len(values)


@pytest.mark.slow
@pytest.mark.integration
class TestContextBenefit:
    """The background-hue preset at reduced scale, three seeds per mode."""

    @pytest.fixture(scope="class")
    def report(self, tmp_path_factory):
        base = ExperimentConfig.from_dict(
            {
                "backbone": {"widths": [8, 16, 16, 16]},
                "rpn": {"pre_nms_top": 64, "post_nms_top": 32},
                "gca": {"fc_dim": 64, "fusion_dim": 16, "roi_batch_size": 16},
                "optimizer": {"lr": 0.01, "lr_steps": [10]},
                "dataset": {"image_size": [64, 64], "num_images": 24, "objects_per_image": 1, "min_object_size": 16, "max_object_size": 28},
                "epochs": 12,
                "eval_images": 24,
                "eval_offset": 24,
                "log_every": 0,
            }
        )
        return ablate(base, preset="context", out_dir=tmp_path_factory.mktemp("context"))

    def test_cells_and_artifacts(self, report):
        """Test six cells whose configs carry the contextual dataset and their own scene seed."""
        assert [(row["mode"], row["seed"]) for row in report.rows] == [
            (mode, seed) for mode in ("baseline", "full") for seed in (0, 1, 2)
        ]
        for row in report.rows:
            saved = load_config(Path(row["checkpoint"]).parent / "config.json")
            assert saved.dataset.contextual_mode and saved.dataset.num_classes == 4
            assert saved.dataset.seed == row["seed"]
            assert len(row["class_accuracy"]) == 4

    def test_full_head_beats_baseline(self, report):
        """Test higher mean AP@0.5 and hue-pair accuracy for the full head across seeds."""
        by_mode = {mode: [row for row in report.rows if row["mode"] == mode] for mode in ("baseline", "full")}
        ap50 = {mode: sum(row["ap50"] for row in rows) / len(rows) for mode, rows in by_mode.items()}
        accuracy = {mode: sum(_mean_accuracy(row) for row in rows) / len(rows) for mode, rows in by_mode.items()}
        assert ap50["full"] > ap50["baseline"], ap50
        assert accuracy["full"] > accuracy["baseline"], accuracy
