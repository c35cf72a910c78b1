"""
Tests for the tensor engine and its differentiable operations.

Tests cover:
- Forward values against direct-loop and closed-form oracles
- Gradient accumulation and backward() error cases
- Finite-difference agreement for every op in the gradient-check suite
- Shape validation and multiply-accumulate counting
"""

import numpy as np
import pytest

from detection import ops
from detection.exceptions import ConfigError, GradientError, ShapeError
from detection.gradcheck import check_op, op_cases
from detection.tensor import Tensor, default_dtype, get_default_dtype


def direct_conv2d(x, w, b, stride, pad):
    """Seven nested loops, no vectorization."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += w[o, c, dy, dx] * xp[i, c, y * stride + dy, xx * stride + dx]
                    out[i, o, y, xx] = acc
    return out


def t64(array, requires_grad=False):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


class TestForwardValues:
    """Forward results against independent computations."""

    @pytest.mark.parametrize("stride,pad,kernel", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)])
    def test_conv2d_matches_direct_loops(self, rng, stride, pad, kernel):
        """Test conv2d against the nested-loop oracle."""
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, kernel, kernel))
        b = rng.standard_normal(4)
        out = ops.conv2d(t64(x), t64(w), t64(b), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, direct_conv2d(x, w, b, stride, pad), atol=1e-12)

    def test_linear_example(self):
        """Test y = x W^T + b on a hand-computed case."""
        x = t64([[1.0, 2.0]])
        w = t64([[1.0, 0.0], [0.5, -1.0], [2.0, 3.0]])
        b = t64([0.0, 1.0, -1.0])
        np.testing.assert_allclose(ops.linear(x, w, b).data, [[1.0, -0.5, 7.0]])

    def test_adaptive_avg_pool_block_means(self):
        """Test that an even split averages 2x2 blocks."""
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = ops.adaptive_avg_pool(t64(x), 2, 2).data[0, 0]
        np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]])

    def test_adaptive_bins_overlap_for_uneven_split(self):
        """Test bin i = [floor(i*H/out), ceil((i+1)*H/out))."""
        assert ops.adaptive_bins(5, 3) == [(0, 2), (1, 4), (3, 5)]

    def test_upsample_nearest2x(self):
        """Test that every input cell becomes a 2x2 block."""
        x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = ops.upsample_nearest2x(x).data[0, 0]
        np.testing.assert_array_equal(out[:2, :2], 1.0)
        np.testing.assert_array_equal(out[2:, 2:], 4.0)

    def test_sigmoid_strictly_inside_unit_interval(self):
        """Test that saturated float32 inputs still give gates in (0, 1)."""
        s = ops.sigmoid(Tensor(np.array([-200.0, -50.0, 0.0, 50.0, 200.0]), dtype=np.float32)).data
        assert np.all(s > 0) and np.all(s < 1)
        assert s[2] == pytest.approx(0.5)

    def test_channel_scale_broadcasts_over_spatial_axes(self):
        """Test that every element of channel c is multiplied by s[n, c]."""
        x = t64(np.ones((1, 2, 3, 3)))
        s = t64([[0.5, 2.0]])
        out = ops.channel_scale(x, s).data
        np.testing.assert_array_equal(out[0, 0], 0.5)
        np.testing.assert_array_equal(out[0, 1], 2.0)

    def test_activation_dispatch(self, rng):
        """Test relu/sigmoid by name, including the sigmoid symmetry identity."""
        np.testing.assert_array_equal(ops.activation(t64([-1.0, 0.0, 2.0]), "relu").data, [0.0, 0.0, 2.0])
        x = rng.standard_normal(100)
        total = ops.activation(t64(x), "sigmoid").data + ops.activation(t64(-x), "sigmoid").data
        np.testing.assert_allclose(total, 1.0, atol=1e-12)
        with pytest.raises(ConfigError):
            ops.activation(t64([1.0]), "tanh")

    def test_global_avg_pool(self, rng):
        """Test channel means and agreement with a 1x1 adaptive pool."""
        np.testing.assert_allclose(ops.global_avg_pool(t64([[[[1.0, 2.0], [3.0, 4.0]]]])).data, [[2.5]])
        x = t64(rng.standard_normal((2, 3, 5, 4)))
        pooled = ops.adaptive_avg_pool(x, 1, 1).data[:, :, 0, 0]
        np.testing.assert_allclose(ops.global_avg_pool(x).data, pooled, atol=1e-12)

    def test_upsample_then_pool_is_identity(self, rng):
        x = rng.standard_normal((1, 2, 3, 5))
        restored = ops.adaptive_avg_pool(ops.upsample_nearest2x(t64(x)), 3, 5).data
        np.testing.assert_allclose(restored, x, atol=1e-12)

    def test_concat_channels_slices_back(self, rng):
        """Test that channel block i of the output is input i."""
        parts = [rng.standard_normal((2, c, 3, 3)) for c in (1, 4, 2)]
        out = ops.concat_channels([t64(p) for p in parts]).data
        assert out.shape == (2, 7, 3, 3)
        np.testing.assert_array_equal(out[:, 1:5], parts[1])
        np.testing.assert_array_equal(ops.concat_channels([t64(parts[0])]).data, parts[0])

    def test_elementwise_identities(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        np.testing.assert_array_equal(ops.elementwise(t64(a), t64(np.zeros((2, 3))), "add").data, a)
        np.testing.assert_array_equal(ops.elementwise(t64(a), t64(np.ones((2, 3))), "mul").data, a)
        np.testing.assert_array_equal(
            ops.elementwise(t64(a), t64(b), "add").data, ops.elementwise(t64(b), t64(a), "add").data
        )
        with pytest.raises(ConfigError):
            ops.elementwise(t64(a), t64(b), "sub")

    def test_flatten_roi_trunk(self, rng):
        """Test the 256x7x7 RoI feature flattening and its inverse."""
        assert ops.flatten(t64(np.zeros((1, 256, 7, 7)))).shape == (1, 12544)
        x = rng.standard_normal((2, 3, 2, 2))
        np.testing.assert_array_equal(ops.unflatten(ops.flatten(t64(x)), (3, 2, 2)).data, x)

    def test_smooth_l1_piecewise(self):
        """Test 0.5 x^2 below 1 and |x| - 0.5 above."""
        np.testing.assert_allclose(ops.smooth_l1_value(np.array([0.5, -2.0])), [0.125, 1.5])

    def test_softmax_rows_sum_to_one(self, rng):
        """Test that the numpy softmax helper normalizes each row."""
        probs = ops.softmax(rng.standard_normal((4, 5)) * 30)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)


class TestBackward:
    """Reverse-mode mechanics."""

    def test_gradients_accumulate_across_calls(self):
        """Test that a second backward adds to the leaf gradient."""
        x = t64([1.0, 2.0], requires_grad=True)
        ops.sum_all(ops.scale(x, 3.0)).backward()
        ops.sum_all(ops.scale(x, 3.0)).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_zero_grad_sets_zeros(self):
        """Test that zero_grad leaves a zero array, not None."""
        x = t64([1.0], requires_grad=True)
        ops.sum_all(x).backward()
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_shared_input_receives_both_paths(self):
        """Test d(x*x)/dx = 2x through a node used twice."""
        x = t64([3.0, -1.0], requires_grad=True)
        ops.sum_all(ops.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [6.0, -2.0])

    def test_non_scalar_backward_raises(self):
        """Test that backward without a seed needs a scalar."""
        x = t64([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError):
            ops.scale(x, 2.0).backward()

    def test_backward_without_grad_raises(self):
        """Test that a constant graph cannot be differentiated."""
        with pytest.raises(GradientError):
            ops.sum_all(t64([1.0])).backward()

    def test_constant_inputs_get_no_gradient(self):
        """Test that inputs without requires_grad stay untouched."""
        x = t64([1.0, 2.0], requires_grad=True)
        c = t64([5.0, 5.0])
        ops.sum_all(ops.mul(x, c)).backward()
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [5.0, 5.0])


class TestFiniteDifferences:
    """Every differentiable op against central differences in float64."""

    @pytest.mark.parametrize("index", range(len(op_cases(np.random.default_rng(0)))))
    def test_op_gradient(self, index):
        """Test that every input of the op passes at 1e-5."""
        rng = np.random.default_rng(index)
        case = op_cases(rng)[index]
        with default_dtype(np.float64):
            entries = check_op(case, 1e-5, rng)
        assert entries
        assert all(e.passed for e in entries), [(e.site, e.max_rel_error) for e in entries]

    def test_linear_error_is_tiny(self):
        """Test the linear op at 1e-6."""
        rng = np.random.default_rng(3)
        case = next(c for c in op_cases(rng) if c.name == "linear")
        entries = check_op(case, 1e-6, rng)
        assert max(e.max_rel_error for e in entries) < 1e-6


class TestValidation:
    """Shape errors and bookkeeping."""

    def test_conv2d_channel_mismatch(self, rng):
        """Test that mismatched in-channels raise ShapeError."""
        with pytest.raises(ShapeError):
            ops.conv2d(t64(rng.standard_normal((1, 3, 4, 4))), t64(np.zeros((2, 4, 3, 3))), t64(np.zeros(2)))

    def test_add_shape_mismatch(self):
        """Test that add refuses implicit broadcasting."""
        with pytest.raises(ShapeError):
            ops.add(t64(np.zeros((2, 3))), t64(np.zeros((3, 2))))

    def test_concat_mismatch(self):
        """Test that concat checks the non-concatenated axes."""
        with pytest.raises(ShapeError):
            ops.concat([t64(np.zeros((1, 2))), t64(np.zeros((1, 3)))], axis=0)

    def test_adaptive_pool_rejects_upsampling(self):
        """Test that the output may not exceed the input."""
        with pytest.raises(ShapeError):
            ops.adaptive_avg_pool(t64(np.zeros((1, 1, 2, 2))), 3, 3)

    def test_count_macs_for_conv_and_linear(self):
        """Test MAC accounting N*Cout*Cin*k*k*Ho*Wo plus N*out*in."""
        with ops.count_macs() as macs:
            ops.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((3, 2, 3, 3))), t64(np.zeros(3)), pad=1)
            ops.linear(t64(np.zeros((2, 5))), t64(np.zeros((4, 5))), t64(np.zeros(4)))
        assert macs[0] == 1 * 3 * 2 * 9 * 16 + 2 * 4 * 5

    def test_macs_not_counted_outside_block(self):
        """Test that the counter is inactive by default."""
        with ops.count_macs() as macs:
            pass
        ops.linear(t64(np.zeros((2, 5))), t64(np.zeros((4, 5))), t64(np.zeros(4)))
        assert macs[0] == 0

    def test_default_dtype_context_restores(self):
        """Test that default_dtype switches and restores the tensor dtype."""
        assert get_default_dtype() is np.float32
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32
