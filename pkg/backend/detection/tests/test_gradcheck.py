"""
Tests for the finite-difference gradient check suites.
"""

import numpy as np
import pytest

from detection.exceptions import ConfigError
from detection.experiment import MODES, VARIANTS
from detection.gradcheck import (
    check_end_to_end,
    end_to_end_grid,
    grad_check_suite,
    numeric_gradient,
    pick_elements,
    relative_error,
    run_end_to_end_suite,
    worst_element,
)


class TestHelpers:
    def test_numeric_gradient_of_quadratic(self):
        """Test d(sum x^2)/dx = 2x and in-place restoration."""
        x = np.array([1.0, -2.0, 0.5])
        grad = numeric_gradient(lambda: float(np.sum(x**2)), x)
        np.testing.assert_allclose(grad, 2 * x, rtol=1e-6)
        np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])

    def test_numeric_gradient_subset(self):
        x = np.arange(4, dtype=np.float64)
        assert numeric_gradient(lambda: float(np.sum(3 * x)), x, [1, 3]).tolist() == pytest.approx([3.0, 3.0])

    def test_relative_error_floor(self):
        """Test that two zero gradients count as agreement and small gradients use an absolute scale."""
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert relative_error(np.ones(2), -np.ones(2)) == pytest.approx(2.0)
        assert relative_error(np.array([0.3]), np.array([0.1])) == pytest.approx(0.2)

    def test_worst_element_beats_norm_ratio(self):
        """Test that one bad small element fails even beside a large agreeing one."""
        analytic = np.array([1000.0, 1e-3])
        numeric = np.array([1000.0, 2e-3])
        norm_ratio = np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))
        assert norm_ratio < 1e-6
        assert relative_error(analytic, numeric) == pytest.approx(1e-3)
        assert worst_element(analytic, numeric) == (1, pytest.approx(1e-3))

    def test_large_gradients_are_relative(self):
        """Test that a 1.5e-4 relative miss on a large gradient is reported as such."""
        analytic, numeric = np.array([200.0]), np.array([200.03])
        assert relative_error(analytic, numeric) == pytest.approx(0.03 / 200.03)
        assert relative_error(analytic, numeric) > 1e-4

    def test_worst_element_of_empty(self):
        assert worst_element(np.zeros(0), np.zeros(0)) == (-1, 0.0)

    def test_pick_elements(self):
        """Test the largest gradient first, then distinct random indices."""
        analytic = np.array([0.1, -5.0, 0.2, 0.3, 0.0, 0.4])
        picked = pick_elements(analytic, 3, np.random.default_rng(0))
        assert picked[0] == 1
        assert len(picked) == 4 and len(set(picked.tolist())) == 4
        assert pick_elements(np.array([2.0]), 4, np.random.default_rng(0)).tolist() == [0]


class TestOpSuite:
    def test_every_op_passes(self):
        """Test the whole op suite at the default 1e-4 tolerance."""
        report = grad_check_suite("ops")
        assert report.entries
        assert report.passed, [(e.site, e.max_rel_error) for e in report.failures()]
        document = report.to_dict()
        assert document["scope"] == "ops"
        assert set(document["entries"][0]) == {"site", "max_rel_error", "elements", "passed", "worst_element"}

    def test_unknown_scope(self):
        with pytest.raises(ConfigError):
            grad_check_suite("everything")


class TestEndToEnd:
    """Whole-detector gradients on a 64x64 single-object scene."""

    def test_grid_covers_modes_and_variants(self):
        """Test every mode once and every variant in full mode."""
        grid = end_to_end_grid()
        assert {mode for mode, _ in grid} == set(MODES)
        assert {variant for mode, variant in grid if mode == "full"} == set(VARIANTS)

    def test_baseline_head(self):
        """Test every parameter of the baseline detector under 1e-4."""
        entries = check_end_to_end("baseline", "conv", 1e-4)
        assert any(e.site.endswith("head.fc6.weight") for e in entries)
        assert all(e.passed for e in entries), [(e.site, e.max_rel_error) for e in entries if not e.passed]

    @pytest.mark.slow
    def test_full_conv(self):
        """Test the full head with conv-level attention under 1e-4."""
        entries = check_end_to_end("full", "conv", 1e-4)
        assert any("lattice" in e.site for e in entries)
        assert all(e.passed for e in entries), [(e.site, e.max_rel_error) for e in entries if not e.passed]

    @pytest.mark.slow
    def test_full_grid(self):
        """Test all nine mode/variant cells."""
        report = run_end_to_end_suite(tolerance=1e-4)
        assert report.passed, [(e.site, e.max_rel_error) for e in report.failures()]

    def test_entries_name_the_worst_element(self):
        """Test that each site checks several elements and reports a position inside the tensor."""
        entries = check_end_to_end("baseline", "conv", 1e-4, elements_per_site=2)
        weight = next(e for e in entries if e.site.endswith("head.fc6.weight"))
        assert weight.elements == 3
        assert weight.worst_element >= 0
