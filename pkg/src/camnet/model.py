"""Dual-branch model: residual backbone plus gradient-weighted attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .attention import AttentionBranch, AttentionConfig, AttentionResult
from .backbone import Backbone, BackboneConfig
from .engine import Tensor
from .errors import ConfigError


@dataclass
class ForwardResult:
    cls_logits: Tensor
    cls_probs: Tensor                    # [N, C]
    attention: AttentionResult | None    # None when the branch was skipped
    fused: Tensor | None                 # mean of the two branch outputs

    @property
    def att_probs(self) -> Tensor | None:
        return self.attention.probs if self.attention is not None else None


def fuse(cls_probs: Tensor, att_probs: Tensor) -> Tensor:
    """Elementwise arithmetic mean of the two branch predictions."""
    return engine.scale(engine.add(cls_probs, att_probs), 0.5)


class DualBranchModel:
    """Backbone and attention branch sharing the penultimate feature tap."""

    def __init__(self, backbone_config: BackboneConfig,
                 attention_config: AttentionConfig, seed: int = 0,
                 dtype=np.float32):
        tap_size, tap_channels = backbone_config.penultimate_geometry()
        if attention_config.map_size != tap_size:
            raise ConfigError(
                f"attention map_size {attention_config.map_size} does not match "
                f"the backbone's penultimate map size {tap_size}")
        rng = np.random.default_rng(seed)
        self.backbone_config = backbone_config
        self.attention_config = attention_config
        self.backbone = Backbone(backbone_config, rng, dtype=dtype)
        self.attention = AttentionBranch(attention_config, tap_channels,
                                         backbone_config.num_classes, rng,
                                         dtype=dtype)
        self.dtype = dtype

    def forward(self, images: Tensor, include_attention: bool = True,
                detach_shared: bool = False) -> ForwardResult:
        """Run both branches (attention needs an active tape).

        ``detach_shared`` cuts the backward path into the backbone; valid
        whenever every backbone parameter is frozen (training phase 2).
        """
        shared, logits = self.backbone.forward(images)
        cls_probs = engine.sigmoid(logits)
        if not include_attention:
            return ForwardResult(logits, cls_probs, None, None)
        if self.attention_config.gradcam_source == "backbone_tap":
            att = self.attention.forward(
                engine.detach(shared) if detach_shared else shared,
                cls_logits=logits, grad_target=shared)
        else:
            att = self.attention.forward(
                engine.detach(shared) if detach_shared else shared)
        fused = fuse(cls_probs, att.probs)
        return ForwardResult(logits, cls_probs, att, fused)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.backbone.named_parameters() + self.attention.named_parameters()

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch: missing {missing or 'none'}, "
                f"unexpected {extra or 'none'}")
        for name, t in params.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ConfigError(
                    f"parameter {name}: shape {src.shape} does not match "
                    f"model shape {t.data.shape}")
            t.data = np.ascontiguousarray(src, dtype=self.dtype)
