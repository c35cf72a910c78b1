"""
Parameter initialization and SGD with momentum and weight decay.

Initialization is deterministic per parameter: each Param draws from a
stream seeded by (global seed, param.path), so adding or reordering layers
never shifts another layer's initial values.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable, Sequence

import numpy as np

from detection.exceptions import GradientError
from detection.nn import Module
from detection.tensor import Param

_SEED_MASK = (1 << 64) - 1


def param_rng(seed: int, path: str) -> np.random.Generator:
    """Random stream derived from (seed, path)."""
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed & _SEED_MASK, *words]))


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(param: Param, fan_in: int, fan_out: int, seed: int) -> None:
    """Fill param uniformly in [-a, a], a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"xavier_init needs positive fans, got {fan_in}, {fan_out}")
    bound = xavier_bound(fan_in, fan_out)
    values = param_rng(seed, param.path).uniform(-bound, bound, size=param.shape)
    param.data = values.astype(param.data.dtype)


def initialize(module: Module, seed: int) -> None:
    """
    Assign dotted paths and initialize every parameter of a module tree.

    Weights (params with fans) get xavier-uniform values; biases start at zero.
    """
    module.assign_paths()
    for param in module.parameters():
        if param.fan_in and param.fan_out:
            xavier_init(param, param.fan_in, param.fan_out, seed)
        else:
            param.data = np.zeros_like(param.data)


class SGD:
    """
    Stochastic gradient descent with momentum and L2 weight decay.

        v <- momentum * v + (grad + weight_decay * param)
        param <- param - lr * v

    Velocity buffers start at zero and are keyed by parameter identity.
    """

    def __init__(self, params: Iterable[Param], lr: float, momentum: float = 0.9, weight_decay: float = 0.0005):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(
    params: Sequence[Param],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: Sequence[np.ndarray],
) -> None:
    """
    Apply one in-place update to params using the given velocity buffers.

    Raises:
        GradientError: if any parameter has no populated gradient
    """
    for param, v in zip(params, velocity):
        if param.grad is None:
            raise GradientError(f"Parameter {param.path or param.shape} has no gradient")
        dtype = param.data.dtype.type
        v *= dtype(momentum)
        v += param.grad + dtype(weight_decay) * param.data
        param.data -= dtype(lr) * v
