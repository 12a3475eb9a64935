"""Attention branch: gradient-weighted class maps feeding a conv classifier.

Three pre-convolutions transform the shared backbone tap into feature maps;
per-class channel weights are the spatial means of a class score's gradient
w.r.t. those maps; the ReLU-clamped weighted sum is softmax-normalized over
space and reduced by three post-convolutions to one confidence per class.

The score whose gradient defines the channel weights is configurable:

* ``aux_head`` (default): a small GAP+linear head on the pre-conv output.
  Its logits exist for the gradient query (plus an optional auxiliary loss
  term); with this wiring the channel weights have the closed form
  ``head_weight / (h*w)``, which the test suite exploits as an oracle.
* ``backbone_tap``: the classification logits differentiated w.r.t. the
  shared tap itself; the pre-convolutions are applied after the weighting.

Channel weights are detached before re-entering the forward computation, so
training never needs second-order derivatives; gradients still flow through
the maps being weighted. Because the weights come from a gradient query,
the branch must run under an active tape (see ``engine.record``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .errors import ConfigError, ShapeError
from .layers import Conv2d, Linear, he_normal

GRADCAM_SOURCES = ("aux_head", "backbone_tap")


@dataclass
class AttentionConfig:
    pre_channels: tuple[int, int, int] = (64, 64, 64)
    post_mid_channels: int = 128
    map_size: int = 16
    gradcam_source: str = "aux_head"
    # normalized maps spread unit mass over map_size^2 cells, so the raw
    # per-cell values are tiny; the confidence stack sees them multiplied
    # by this factor or its first layer would start all but signal-free
    post_input_gain: float = 64.0

    def __post_init__(self):
        self.pre_channels = tuple(self.pre_channels)
        if len(self.pre_channels) != 3 or min(self.pre_channels) < 1:
            raise ConfigError(f"pre_channels needs 3 positive widths, got {self.pre_channels}")
        if self.post_mid_channels < 1 or self.map_size < 1:
            raise ConfigError("post_mid_channels and map_size must be positive")
        if self.gradcam_source not in GRADCAM_SOURCES:
            raise ConfigError(
                f"gradcam_source must be one of {GRADCAM_SOURCES}, got {self.gradcam_source!r}")
        if self.post_input_gain <= 0:
            raise ConfigError(f"post_input_gain must be positive, got {self.post_input_gain}")


@dataclass
class SaliencyMaps:
    """Per-class spatial maps: ReLU-clamped raw and softmax-normalized."""

    raw: np.ndarray         # [N, C, h, w], >= 0
    normalized: np.ndarray  # [N, C, h, w], > 0, sums to 1 per (n, c)


@dataclass
class AttentionResult:
    probs: Tensor                 # [N, C] sigmoid confidences
    maps: SaliencyMaps
    channel_weights: np.ndarray   # [N, C, K], detached
    aux_logits: Tensor | None     # [N, C] under the aux_head wiring
    connected: bool               # False when the score ignored the maps


def channel_gradients(score_source: Tensor, maps: Tensor) -> tuple[np.ndarray, bool]:
    """Spatial-mean gradient of each class score w.r.t. each map channel.

    Returns detached weights [N, C, K] and a flag that is False when the
    scores turned out not to depend on the maps.
    """
    n, k = maps.shape[0], maps.shape[1]
    c = score_source.shape[1]
    weights = np.zeros((n, c, k), dtype=maps.dtype)
    connected = True
    for ci in range(c):
        # summing over the batch gives each sample its own gradient rows
        total = engine.sum_all(engine.select_column(score_source, ci))
        g, ok = engine.grad_wrt(total, maps)
        connected = connected and ok
        weights[:, ci, :] = g.data.mean(axis=(2, 3))
    return weights, connected


def gradcam(maps: Tensor, score_source: Tensor) -> tuple[Tensor, np.ndarray, bool]:
    """ReLU of the per-class gradient-weighted channel sum of ``maps``.

    The weights are detached before the weighted sum, so gradients flow
    through ``maps`` but not through the weighting. A disconnected score
    yields all-zero maps and a False flag.
    """
    weights, connected = channel_gradients(score_source, maps)
    raw = engine.relu(engine.weighted_channel_sum(maps, Tensor(weights)))
    return raw, weights, connected


def normalize_maps(raw: Tensor) -> Tensor:
    """Per-class spatial softmax (max-subtracted for stability)."""
    return engine.spatial_softmax(raw)


class AttentionBranch:
    def __init__(self, config: AttentionConfig, in_channels: int, num_classes: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.num_classes = num_classes
        k1, k3, k5 = config.pre_channels
        aux_wired = config.gradcam_source == "aux_head"
        self.pre1 = Conv2d(in_channels if aux_wired else num_classes, k1, 1, rng,
                           dtype=dtype)
        self.pre2 = Conv2d(k1, k3, 3, rng, padding=1, dtype=dtype)
        self.pre3 = Conv2d(k3, k5, 1, rng, dtype=dtype)
        self.aux = Linear(k5, num_classes, rng, dtype=dtype) if aux_wired else None
        if self.aux is not None:
            # a random projection of pooled features lands far inside the
            # clamped tail of the confidence loss once the shared trunk has
            # been trained; starting the score head at zero keeps the first
            # maps uniform and the loss at chance level instead
            self.aux.weight.data = np.zeros_like(self.aux.weight.data)
        self.post1 = Conv2d(num_classes if aux_wired else k5, num_classes, 1, rng,
                            dtype=dtype)
        self.post2 = Conv2d(num_classes, config.post_mid_channels, 1, rng, dtype=dtype)
        self.post3 = Conv2d(config.post_mid_channels, num_classes, config.map_size,
                            rng, dtype=dtype)
        # the full-map kernel starts spatially flat (a GAP+linear head in
        # disguise): peaks in the maps land anywhere, so a location-specific
        # random kernel generalizes poorly from small datasets, while flat
        # aggregation is location-invariant from the first step and gradient
        # descent can still specialize it spatially later
        head = he_normal(rng, (num_classes, config.post_mid_channels),
                         config.post_mid_channels, dtype)
        area = config.map_size * config.map_size
        self.post3.weight.data = np.broadcast_to(
            head[:, :, None, None] / area, self.post3.weight.data.shape).copy()

    def _check_spatial(self, x: Tensor, where: str) -> None:
        s = self.config.map_size
        if x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"{where} expects {s}x{s} maps, got "
                             f"{x.shape[2]}x{x.shape[3]}")

    def pre_convs(self, x: Tensor) -> Tensor:
        """Three ReLU convolutions (1x1, 3x3 pad 1, 1x1); size preserved."""
        self._check_spatial(x, "pre convolutions")
        x = engine.relu(self.pre1(x))
        x = engine.relu(self.pre2(x))
        return engine.relu(self.pre3(x))

    def aux_scores(self, features: Tensor) -> Tensor:
        """GAP + linear logits; the default gradient source for the maps."""
        return self.aux(engine.global_avg_pool(features))

    def post_convs(self, x: Tensor) -> Tensor:
        """Reduce maps to per-class sigmoid confidences.

        Two 1x1 ReLU convolutions, then a full-map-size kernel that
        collapses space to 1x1, then the sigmoid. The input gain only
        rescales (conv of a scaled input equals the same conv with scaled
        weights), but it lets the stack train from He-scale weights.
        """
        self._check_spatial(x, "post convolutions")
        x = engine.relu(self.post1(engine.scale(x, self.config.post_input_gain)))
        x = engine.relu(self.post2(x))
        return engine.sigmoid(engine.flatten(self.post3(x)))

    def forward(self, shared: Tensor, cls_logits: Tensor | None = None,
                grad_target: Tensor | None = None) -> AttentionResult:
        """Run the branch on the shared backbone tap.

        ``cls_logits`` is required by the backbone_tap wiring; there,
        ``grad_target`` may name the live (non-detached) tap when ``shared``
        itself was detached from the backbone.
        """
        if self.config.gradcam_source == "aux_head":
            features = self.pre_convs(shared)
            aux_logits = self.aux_scores(features)
            raw, weights, connected = gradcam(features, aux_logits)
            normalized = normalize_maps(raw)
            probs = self.post_convs(normalized)
        else:
            if cls_logits is None:
                raise ConfigError("backbone_tap wiring needs the classification logits")
            aux_logits = None
            target = grad_target if grad_target is not None else shared
            weights, connected = channel_gradients(cls_logits, target)
            raw = engine.relu(engine.weighted_channel_sum(shared, Tensor(weights)))
            normalized = normalize_maps(raw)
            probs = self.post_convs(self.pre_convs(normalized))
        return AttentionResult(
            probs=probs,
            maps=SaliencyMaps(raw=raw.data, normalized=normalized.data),
            channel_weights=weights,
            aux_logits=aux_logits,
            connected=connected,
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = ["pre1", "pre2", "pre3"]
        if self.aux is not None:
            names.append("aux")
        names += ["post1", "post2", "post3"]
        params = []
        for name in names:
            params.extend(getattr(self, name).named_parameters(f"attention.{name}"))
        return params
