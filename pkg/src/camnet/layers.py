"""Parameterized layers over the autodiff engine.

Layers hold their parameters as detached tensors; the active tape attaches
them as leaves on first use, so gradients from one recorded step accumulate
per parameter. He-style fan-in initialization, zero biases.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Tensor


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dtype=np.float32):
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, k, k),
                                       in_channels * k * k, dtype))
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return engine.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class Linear:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(he_normal(rng, (out_features, in_features),
                                       in_features, dtype))
        self.bias = Tensor(np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return engine.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def collect_parameters(layers: dict) -> list[tuple[str, Tensor]]:
    """Flatten {name: layer} into an ordered (name, tensor) list."""
    out = []
    for name, layer in layers.items():
        out.extend(layer.named_parameters(name))
    return out
