"""
Module containers and the parameterized layers built on detection.ops.

Modules register Params and child Modules as attributes; parameter paths are
the dotted attribute chain from the root, e.g. "fpn.lateral.0.weight".
"""

from __future__ import annotations

from typing import Iterable, Iterator, Optional

import numpy as np

from detection import ops
from detection.tensor import Param, Tensor


class Module:
    """Base class for layers and models."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        """Yield (path, param) pairs in registration order, each Param once."""
        seen: set[int] = set()
        yield from self._named_parameters(prefix, seen)

    def _named_parameters(self, prefix: str, seen: set) -> Iterator[tuple[str, Param]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Param):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield path, value
            elif isinstance(value, Module):
                yield from value._named_parameters(f"{path}.", seen)

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        return self

    def assign_paths(self) -> None:
        for path, param in self.named_parameters():
            param.path = path

    def state_dict(self) -> dict[str, np.ndarray]:
        return {path: p.data for path, p in self.named_parameters()}


class ModuleList(Module):
    """An indexable list of child modules; children are named "0", "1", ..."""

    def __init__(self, modules: Iterable[Module] = ()):
        self._items: list[Module] = []
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, pad: Optional[int] = None):
        k = kernel_size
        self.weight = Param(
            (out_channels, in_channels, k, k), fan_in=in_channels * k * k, fan_out=out_channels * k * k
        )
        self.bias = Param((out_channels,))
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int):
        self.weight = Param((out_features, in_features), fan_in=in_features, fan_out=out_features)
        self.bias = Param((out_features,))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
