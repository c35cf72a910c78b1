"""
Dense tensor engine with reverse-mode differentiation.

This module provides:
- Tensor: a numpy array plus an optional gradient accumulator
- Param: a trainable Tensor carrying a unique dotted path
- Function: base class for differentiable operations (see detection.ops)
- default_dtype: switch between float32 training and float64 verification

Gradients accumulate (+=) into leaf tensors that require them; call
zero_grad() (or Module.zero_grad()) to clear them between steps.
"""

from __future__ import annotations

import contextlib
from typing import Any, Iterator, Optional, Sequence

import numpy as np

from detection.exceptions import GradientError

_DEFAULT_DTYPE: type = np.float32


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """
    Temporarily switch the dtype used for new tensors and parameters.

    Usage:
        with default_dtype(np.float64):
            model = build_model(cfg)
    """
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement forward() on raw numpy arrays and backward() which
    maps the gradient of the output to one gradient per input tensor (None
    for inputs that receive no gradient).
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(
            out_data,
            creator=func if requires_grad else None,
            requires_grad=requires_grad,
            dtype=out_data.dtype,
        )


class Tensor:
    """A dense numeric array with an optional gradient accumulator."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype=None,
    ):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _DEFAULT_DTYPE))
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    # ----------------------------------------
    # Introspection
    # ----------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # ----------------------------------------
    # Arithmetic sugar (delegates to detection.ops)
    # ----------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        from detection import ops

        return ops.add(self, other)

    def __mul__(self, other) -> "Tensor":
        from detection import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from detection import ops

        return ops.scale(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        from detection import ops

        return ops.scale(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        from detection import ops

        return ops.sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        from detection import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    # ----------------------------------------
    # Differentiation
    # ----------------------------------------

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(self)/d(leaf) into every reachable leaf that requires grad.

        Raises:
            GradientError: if called without a seed gradient on a non-scalar tensor,
                or on a tensor that does not require gradients
        """
        if not self.requires_grad:
            raise GradientError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GradientError(
                    f"backward() needs a scalar loss, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node.creator is None:
                if node.grad is None:
                    node.grad = np.array(node_grad, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += node_grad
                continue
            input_grads = node.creator.backward(node_grad)
            for parent, parent_grad in zip(node.creator.tensors, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


class Param(Tensor):
    """
    A trainable tensor.

    The dotted path (e.g. "head.branches.0.fc1.weight") is assigned when the
    owning module tree is initialized and seeds the parameter's init stream.
    """

    def __init__(self, shape: Sequence[int], fan_in: int = 0, fan_out: int = 0, dtype=None):
        super().__init__(np.zeros(tuple(shape)), requires_grad=True, dtype=dtype)
        self.path = ""
        self.fan_in = fan_in
        self.fan_out = fan_out

    def __repr__(self) -> str:
        return f"Param({self.path or '?'}, shape={self.shape}, dtype={self.dtype.name})"


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS over the creator graph (parents before children)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in reversed(node.creator.tensors):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)
