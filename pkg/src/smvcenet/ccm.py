"""Class comparison module: query feature vs. class embedding -> binary mask.

Every conv is followed by ReLU and none by a normalisation layer. Episodes in
one batch usually target different classes, and batch statistics would blur
the per-class signal carried by each sample's embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import QUERY_CHANNELS
from .errors import ShapeError

ASPP_RATES = (1, 6, 12, 18)
FEATURE_CHANNELS = 256


@dataclass
class PredictionMask:
    mask: torch.Tensor  # (B,) H x W, uint8 {0, 1}
    probs: torch.Tensor  # (B,) H x W, foreground probability


class ResidualBlock(nn.Module):
    """Basic block: two 3x3 convs with an identity skip, no normalisation."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(x + self.conv2(self.relu(self.conv1(x))))


class ASPP(nn.Module):
    def __init__(self, in_channels: int = FEATURE_CHANNELS, out_channels: int = FEATURE_CHANNELS,
                 rates: Sequence[int] = ASPP_RATES):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, out_channels, 1) if r == 1
            else nn.Conv2d(in_channels, out_channels, 3, padding=r, dilation=r)
            for r in rates
        )
        self.image_pool = nn.Conv2d(in_channels, out_channels, 1)
        self.project = nn.Conv2d(out_channels * (len(rates) + 1), out_channels, 1)
        self.relu = nn.ReLU()

    def forward(self, x):
        outs = [self.relu(b(x)) for b in self.branches]
        pooled = self.relu(self.image_pool(x.mean(dim=(-2, -1), keepdim=True)))
        outs.append(pooled.expand(-1, -1, *x.shape[-2:]))
        return self.relu(self.project(torch.cat(outs, dim=1)))


class ClassComparison(nn.Module):
    """``compare``: 2C embedding -> C, concat with the 256-channel query
    feature, reduce 256+C -> 256, three residual blocks, ASPP, 2 logits."""

    def __init__(self, class_channels: int, embedding_channels: int = None,
                 aspp_rates: Sequence[int] = ASPP_RATES, n_res_blocks: int = 3):
        super().__init__()
        embedding_channels = embedding_channels or 2 * class_channels
        self.class_channels = class_channels
        self.project = nn.Conv2d(embedding_channels, class_channels, 1)
        self.reduce = nn.Conv2d(QUERY_CHANNELS + class_channels, FEATURE_CHANNELS, 1)
        self.res_blocks = nn.Sequential(*[ResidualBlock(FEATURE_CHANNELS) for _ in range(n_res_blocks)])
        self.aspp = ASPP(FEATURE_CHANNELS, FEATURE_CHANNELS, aspp_rates)
        self.head = nn.Conv2d(FEATURE_CHANNELS, 2, 1)
        self.relu = nn.ReLU()

    def reduced(self, f_query: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        if f_query.shape[-2:] != embedding.shape[-2:]:
            raise ShapeError(
                f"query grid {tuple(f_query.shape[-2:])} != embedding grid {tuple(embedding.shape[-2:])}"
            )
        e = self.relu(self.project(embedding))
        return self.relu(self.reduce(torch.cat([f_query, e], dim=1)))

    def forward(self, f_query: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        x = self.reduced(f_query, embedding)
        return self.head(self.aspp(self.res_blocks(x)))


def compare(f_query: torch.Tensor, embedding, ccm: ClassComparison) -> torch.Tensor:
    e = getattr(embedding, "e_vce", embedding)
    squeeze = f_query.ndim == 3
    if squeeze:
        f_query, e = f_query.unsqueeze(0), e.unsqueeze(0)
    logits = ccm(f_query, e)
    return logits.squeeze(0) if squeeze else logits


def foreground_probs(logits: torch.Tensor, h_input: int, w_input: int) -> torch.Tensor:
    """Softmax over the two channels, then bilinear upsampling of the
    foreground probability to the input size (align_corners=False)."""
    squeeze = logits.ndim == 3
    if squeeze:
        logits = logits.unsqueeze(0)
    if h_input < logits.shape[-2] or w_input < logits.shape[-1]:
        raise ShapeError("output size is smaller than the logit grid")
    fg = torch.softmax(logits, dim=1)[:, 1:2]
    probs = F.interpolate(fg, size=(h_input, w_input), mode="bilinear", align_corners=False)[:, 0]
    return probs.squeeze(0) if squeeze else probs


def predict_mask(logits: torch.Tensor, h_input: int, w_input: int) -> PredictionMask:
    """Upsample, then threshold; a probability of exactly 0.5 is foreground."""
    probs = foreground_probs(logits, h_input, w_input)
    return PredictionMask(mask=(probs >= 0.5).to(torch.uint8), probs=probs)
