"""Full network: frozen backbone -> MAM -> SAM -> CCM."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch
import torch.nn as nn

from .backbone import BackboneConfig, FrozenBackbone
from .ccm import ASPP_RATES, ClassComparison, PredictionMask, foreground_probs, predict_mask
from .mam import MultiScaleAttention
from .sam import SpatialAttention


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mam_upsample: str = "bilinear"
    aspp_rates: Tuple[int, ...] = ASPP_RATES


class SMVCENet(nn.Module):
    def __init__(self, config: ModelConfig = None, load_backbone_weights: bool = True):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        c = config.backbone.block4_out_channels
        self.backbone = FrozenBackbone(config.backbone, load_backbone_weights)
        self.mam = MultiScaleAttention(upsample=config.mam_upsample)
        self.sam = SpatialAttention(c, in_expansion=self.mam.expansion)
        self.ccm = ClassComparison(c, self.sam.out_channels, config.aspp_rates)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Batch of images in [0, 1] -> ``B x 2 x Hf x Wf`` mask logits.

        Each image gets its own class embedding; nothing is shared across
        the batch.
        """
        feats = self.backbone(images)
        embedding = self.sam(self.mam(feats.i_class))
        return self.ccm(feats.f_query, embedding)

    def probabilities(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        return foreground_probs(self(images), *images.shape[-2:])

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> PredictionMask:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        return predict_mask(self(images), *images.shape[-2:])

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def parameter_manifest(self) -> Dict[str, Dict[str, Tuple[int, ...]]]:
        """Parameter shapes grouped into ``frozen`` and ``trainable``, plus buffers."""
        out = {"frozen": {}, "trainable": {}, "buffers": {}}
        for n, p in self.named_parameters():
            out["trainable" if p.requires_grad else "frozen"][n] = tuple(p.shape)
        for n, b in self.named_buffers():
            out["buffers"][n] = tuple(b.shape)
        return out

    def parameter_counts(self) -> Dict[str, int]:
        counts = {"frozen": 0, "trainable": 0}
        for p in self.parameters():
            counts["trainable" if p.requires_grad else "frozen"] += p.numel()
        return counts
