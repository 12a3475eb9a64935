"""Residual CNN classification branch.

A configurable stack of bottleneck residual stages ending in a global
average pool and one sigmoid output per class. The output of the
penultimate stage is exposed as the shared feature tap consumed by the
attention branch; with the attention branch removed the model is exactly
this backbone, which is the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .errors import ConfigError, ShapeError
from .layers import Conv2d, Linear

LABEL_ROLES = ("ground_truth", "classification", "attention", "fused")


@dataclass
class LabelVector:
    """Per-class scores in [0,1] with a role tag describing their origin."""

    values: np.ndarray  # [C] or [N, C]
    role: str

    def __post_init__(self):
        if self.role not in LABEL_ROLES:
            raise ConfigError(f"unknown label role {self.role!r}")
        self.values = np.asarray(self.values)
        if self.role == "ground_truth":
            if not np.all(np.isin(self.values, (0, 1))):
                raise ConfigError("ground-truth labels must be exactly 0 or 1")
        elif self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ConfigError(f"{self.role} scores must lie in [0, 1]")


@dataclass
class BackboneConfig:
    input_size: int = 64
    input_channels: int = 1
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: int = 2
    stage_blocks: list[int] = field(default_factory=lambda: [2, 2, 2])
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    bottleneck_ratio: int = 4
    num_classes: int = 8

    def __post_init__(self):
        if len(self.stage_blocks) != len(self.stage_channels):
            raise ConfigError(
                f"stage_blocks ({self.stage_blocks}) and stage_channels "
                f"({self.stage_channels}) must have equal length")
        if len(self.stage_blocks) < 2:
            raise ConfigError("need at least 2 stages so a penultimate tap exists")
        if min(self.stage_blocks) < 1 or min(self.stage_channels) < 1:
            raise ConfigError("stage sizes must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        h, _ = self.penultimate_geometry()
        if h < 2:
            raise ConfigError(
                f"input_size {self.input_size} leaves a {h}x{h} penultimate map; "
                "need at least 2x2")

    def stage_sizes(self) -> list[int]:
        """Spatial extent after the stem and after each stage."""
        size = (self.input_size + 2 * (self.stem_kernel // 2) - self.stem_kernel) \
            // self.stem_stride + 1
        size = (size - self.stem_pool) // 2 + 1
        sizes = []
        for i in range(len(self.stage_blocks)):
            if i > 0:  # first stage keeps the stem resolution
                size = (size + 2 - 3) // 2 + 1
            sizes.append(size)
        return sizes

    def penultimate_geometry(self) -> tuple[int, int]:
        """(spatial size, channels) of the shared feature tap."""
        return self.stage_sizes()[-2], self.stage_channels[-2]


class BottleneckBlock:
    """Triple-layer residual block: 1x1 reduce, 3x3, 1x1 expand.

    Shortcut is the identity when shapes match, else a strided 1x1
    projection.
    """

    def __init__(self, in_channels: int, out_channels: int, mid_channels: int,
                 stride: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d(in_channels, mid_channels, 1, rng, dtype=dtype)
        self.conv2 = Conv2d(mid_channels, mid_channels, 3, rng, stride=stride,
                            padding=1, dtype=dtype)
        self.conv3 = Conv2d(mid_channels, out_channels, 1, rng, dtype=dtype)
        self.project = None
        if stride != 1 or in_channels != out_channels:
            self.project = Conv2d(in_channels, out_channels, 1, rng,
                                  stride=stride, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        out = engine.relu(self.conv1(x))
        out = engine.relu(self.conv2(out))
        out = self.conv3(out)
        shortcut = x if self.project is None else self.project(x)
        return engine.relu(engine.add(out, shortcut))

    def named_parameters(self, prefix: str):
        params = []
        for name in ("conv1", "conv2", "conv3"):
            params.extend(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        if self.project is not None:
            params.extend(self.project.named_parameters(f"{prefix}.project"))
        return params


class Backbone:
    def __init__(self, config: BackboneConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        c = config
        self.stem = Conv2d(c.input_channels, c.stem_channels, c.stem_kernel, rng,
                           stride=c.stem_stride, padding=c.stem_kernel // 2,
                           dtype=dtype)
        self.stages: list[list[BottleneckBlock]] = []
        in_ch = c.stem_channels
        for si, (blocks, out_ch) in enumerate(zip(c.stage_blocks, c.stage_channels)):
            mid = max(out_ch // c.bottleneck_ratio, 1)
            stage = []
            for bi in range(blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                stage.append(BottleneckBlock(in_ch, out_ch, mid, stride, rng, dtype))
                in_ch = out_ch
            self.stages.append(stage)
        self.head = Linear(c.stage_channels[-1], c.num_classes, rng, dtype=dtype)

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Return (shared penultimate-stage maps, class logits)."""
        c = self.config
        n_, ch, h, w = image.shape if image.data.ndim == 4 else (None,) * 4
        if image.data.ndim != 4 or ch != c.input_channels or \
                h != c.input_size or w != c.input_size:
            raise ShapeError(
                f"backbone expects input [N,{c.input_channels},{c.input_size},"
                f"{c.input_size}], got {tuple(image.data.shape)}")
        x = engine.relu(self.stem(image))
        x = engine.maxpool2d(x, window=c.stem_pool, stride=2)
        shared = None
        for si, stage in enumerate(self.stages):
            for block in stage:
                x = block(x)
            if si == len(self.stages) - 2:
                shared = x
        pooled = engine.global_avg_pool(x)
        logits = self.head(pooled)
        return shared, logits

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = self.stem.named_parameters("backbone.stem")
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                params.extend(block.named_parameters(f"backbone.stage{si}.block{bi}"))
        params.extend(self.head.named_parameters("backbone.head"))
        return params


def classify(logits: Tensor) -> LabelVector:
    """Sigmoid per class; the classification branch's prediction vector."""
    probs = engine.sigmoid(logits)
    return LabelVector(probs.data, role="classification")
