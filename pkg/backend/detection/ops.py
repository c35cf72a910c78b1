"""
Differentiable operations over detection.tensor.Tensor.

Every operation is a Function subclass with a numpy forward and an analytic
backward, plus a lowercase helper that validates shapes and applies it.
Reductions run in a fixed order so results are reproducible bit for bit
within one build.

Convolution uses an im2col formulation (sliding windows + tensordot); its
agreement with a direct nested-loop convolution is asserted by the tests.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Iterator, Optional, Sequence

import numpy as np

from detection.exceptions import ConfigError, ShapeError
from detection.tensor import Function, Tensor

# Multiply-accumulate counter used by detection.cost; inactive unless a
# count_macs() block is open.
_mac_counter: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar(
    "mac_counter", default=None
)


@contextlib.contextmanager
def count_macs() -> Iterator[list]:
    """
    Count multiply-accumulates of conv2d/linear calls made inside the block.

    Usage:
        with count_macs() as macs:
            model.detect(image)
        total = macs[0]
    """
    counter = [0]
    token = _mac_counter.set(counter)
    try:
        yield counter
    finally:
        _mac_counter.reset(token)


def _record_macs(count: int) -> None:
    counter = _mac_counter.get()
    if counter is not None:
        counter[0] += int(count)


# ========================================
# Convolution and fully connected layers
# ========================================


class Conv2d(Function):
    def forward(self, x, w, b, stride: int = 1, pad: int = 0):
        n, cin, h, wd = x.shape
        cout, wcin, kh, kw = w.shape
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = windows[:, :, : stride * ho : stride, : stride * wo : stride]
        # (N, Ho, Wo, Cout): contract in-channel, kernel rows, kernel cols
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + b.reshape(1, cout, 1, 1)
        self.cols = cols
        self.geometry = (x.shape, xp.shape, stride, pad, ho, wo)
        _record_macs(n * cout * cin * kh * kw * ho * wo)
        return np.ascontiguousarray(out, dtype=x.dtype)

    def backward(self, grad):
        x_shape, xp_shape, stride, pad, ho, wo = self.geometry
        _, w, _ = (t.data for t in self.tensors)
        kh, kw = w.shape[2], w.shape[3]
        grad_w = np.tensordot(grad, self.cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))
        # (N, Ho, Wo, Cin, kh, kw)
        grad_cols = np.tensordot(grad, w, axes=([1], [0]))
        grad_xp = np.zeros(xp_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if pad:
            grad_xp = grad_xp[:, :, pad : pad + x_shape[2], pad : pad + x_shape[3]]
        return grad_xp, grad_w, grad_b


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """
    2-D convolution with zero padding.

    Raises:
        ShapeError: on channel mismatch or a non-positive output extent
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {w.shape[0]} outputs")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    ho = (x.shape[2] + 2 * pad - w.shape[2]) // stride + 1
    wo = (x.shape[3] + 2 * pad - w.shape[3]) // stride + 1
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3] or ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output extent non-positive for input {x.shape}, kernel {w.shape}")
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


class Linear(Function):
    def forward(self, x, w, b):
        _record_macs(x.shape[0] * w.shape[0] * w.shape[1])
        return x @ w.T + b

    def backward(self, grad):
        x, w, _ = (t.data for t in self.tensors)
        return grad @ w, grad.T @ x, grad.sum(axis=0)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y[n, o] = b[o] + sum_i w[o, i] * x[n, i]"""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"linear dimension mismatch: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    return Linear.apply(x, w, b)


# ========================================
# Activations
# ========================================


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        # keep the gate strictly inside (0, 1) even where float rounding saturates
        lo = np.finfo(x.dtype).tiny
        hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
        self.out = np.clip(out, lo, hi)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"Unknown activation {kind!r}")


# ========================================
# Pooling and resampling
# ========================================


def adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    """Bin i covers [floor(i*size/out), ceil((i+1)*size/out))."""
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def _averaging_matrix(size: int, out: int, dtype) -> np.ndarray:
    mat = np.zeros((out, size), dtype=dtype)
    for i, (start, stop) in enumerate(adaptive_bins(size, out)):
        mat[i, start:stop] = 1.0 / (stop - start)
    return mat


class AdaptiveAvgPool(Function):
    # Bins are rectangles, so the bin mean factorizes into a row average
    # followed by a column average.
    def forward(self, x, oh: int, ow: int):
        self.rows = _averaging_matrix(x.shape[2], oh, x.dtype)
        self.cols = _averaging_matrix(x.shape[3], ow, x.dtype)
        return self.rows @ x @ self.cols.T

    def backward(self, grad):
        return (self.rows.T @ grad @ self.cols,)


def adaptive_avg_pool(x: Tensor, oh: int, ow: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects a 4-D tensor, got {x.shape}")
    if oh <= 0 or ow <= 0 or oh > x.shape[2] or ow > x.shape[3]:
        raise ShapeError(f"adaptive_avg_pool output ({oh},{ow}) invalid for input {x.shape}")
    return AdaptiveAvgPool.apply(x, oh=oh, ow=ow)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.input_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.input_shape
        expanded = np.broadcast_to(grad[:, :, None, None] / (h * w), self.input_shape)
        return (np.array(expanded, dtype=grad.dtype),)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global_avg_pool expects a non-empty 4-D tensor, got {x.shape}")
    return GlobalAvgPool.apply(x)


class UpsampleNearest2x(Function):
    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h2, w2 = grad.shape
        return (grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects a 4-D tensor, got {x.shape}")
    return UpsampleNearest2x.apply(x)


# ========================================
# Structural operations
# ========================================


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            a != b for d, (a, b) in enumerate(zip(x.shape, ref)) if d != axis
        ):
            raise ShapeError(f"concat shape mismatch along axis {axis}: {ref} vs {x.shape}")
    return Concat.apply(*xs, axis=axis)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack 4-D tensors along the channel axis in list order."""
    if xs and any(x.ndim != 4 for x in xs):
        raise ShapeError("concat_channels expects 4-D tensors")
    return concat(xs, axis=1)


class Reshape(Function):
    def forward(self, x, shape: tuple):
        self.input_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.input_shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def flatten(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C*H*W], row-major."""
    return reshape(x, (x.shape[0], -1))


def unflatten(x: Tensor, shape: Sequence[int]) -> Tensor:
    return reshape(x, (x.shape[0], *shape))


class TakeFlat(Function):
    def forward(self, x, index: np.ndarray):
        self.index = index
        self.input_shape = x.shape
        return x.reshape(-1)[index]

    def backward(self, grad):
        full = np.zeros(int(np.prod(self.input_shape)), dtype=grad.dtype)
        np.add.at(full, self.index.reshape(-1), grad.reshape(-1))
        return (full.reshape(self.input_shape),)


def take_flat(x: Tensor, index) -> Tensor:
    """Gather elements of the row-major flattened tensor; output takes the index shape."""
    return TakeFlat.apply(x, index=np.asarray(index, dtype=np.int64))


class TakeRows(Function):
    def forward(self, x, index: np.ndarray):
        self.index = index
        self.input_shape = x.shape
        return x[index]

    def backward(self, grad):
        full = np.zeros(self.input_shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather along the leading axis (e.g. the descriptor of each RoI's source image)."""
    return TakeRows.apply(x, index=np.asarray(index, dtype=np.int64))


# ========================================
# Element-wise arithmetic
# ========================================


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = (t.data for t in self.tensors)
        return grad * b, grad * a


class Scale(Function):
    def forward(self, x, factor: float):
        self.factor = factor
        return x * x.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ConfigError(f"Unknown element-wise kind {kind!r}")


def add_all(xs: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of equally shaped tensors."""
    if not xs:
        raise ShapeError("add_all needs at least one tensor")
    total = xs[0]
    for x in xs[1:]:
        total = add(total, x)
    return total


class ChannelScale(Function):
    def forward(self, x, s):
        self.gate = s.reshape(s.shape + (1,) * (x.ndim - 2))
        return x * self.gate

    def backward(self, grad):
        x = self.tensors[0].data
        grad_s = grad * x
        if x.ndim > 2:
            grad_s = grad_s.sum(axis=tuple(range(2, x.ndim)))
        return grad * self.gate, grad_s


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of channel c in sample n by s[n, c]."""
    if s.ndim != 2 or x.ndim < 2 or x.shape[:2] != s.shape:
        raise ShapeError(f"channel_scale mismatch: x {x.shape}, gate {s.shape}")
    return ChannelScale.apply(x, s)


class SumAll(Function):
    def forward(self, x):
        self.input_shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.input_shape, grad, dtype=grad.dtype),)


def sum_all(x: Tensor) -> Tensor:
    return SumAll.apply(x)


# ========================================
# Losses (summed; callers normalize)
# ========================================


class BinaryCrossEntropyWithLogits(Function):
    def forward(self, logits, targets: np.ndarray):
        self.targets = targets.astype(logits.dtype)
        # log(1 + exp(-|x|)) + max(x, 0) - x*t
        loss = np.logaddexp(0, -np.abs(logits)) + np.maximum(logits, 0) - logits * self.targets
        return np.asarray(loss.sum(), dtype=logits.dtype)

    def backward(self, grad):
        logits = self.tensors[0].data
        e = np.exp(-np.abs(logits))
        prob = np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((prob - self.targets) * grad,)


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"bce target shape {targets.shape} != logits {logits.shape}")
    return BinaryCrossEntropyWithLogits.apply(logits, targets=targets)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels: np.ndarray):
        self.labels = labels
        self.log_probs = log_softmax(logits)
        picked = self.log_probs[np.arange(len(labels)), labels]
        return np.asarray(-picked.sum(), dtype=logits.dtype)

    def backward(self, grad):
        probs = np.exp(self.log_probs)
        probs[np.arange(len(self.labels)), self.labels] -= 1
        return (probs * grad,)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy shape mismatch: logits {logits.shape}, labels {labels.shape}")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


def smooth_l1_value(x):
    """0.5 x^2 for |x| < 1 else |x| - 0.5."""
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


class SmoothL1(Function):
    def forward(self, pred, target: np.ndarray):
        self.diff = pred - target.astype(pred.dtype)
        return np.asarray(smooth_l1_value(self.diff).sum(), dtype=pred.dtype)

    def backward(self, grad):
        return (np.clip(self.diff, -1, 1) * grad,)


def smooth_l1(pred: Tensor, target) -> Tensor:
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ShapeError(f"smooth_l1 target shape {target.shape} != {pred.shape}")
    return SmoothL1.apply(pred, target=target)
