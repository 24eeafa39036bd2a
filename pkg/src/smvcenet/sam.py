"""Spatial attention module producing the visual class embedding.

Pipeline on the multi-scale feature ``o_m`` (5C channels)::

    compress:   5C -> C -> C/2           (1x1 convs)
    non-local:  three 1x1 branches (key/query/value) over all H*W positions
    recover:    C/2 -> C                  (1x1 conv, initialised at 0.01 scale)
    direct:     f(o_m), 5C -> C           (3x3 conv)
    embedding = cat(recovered, direct)    (2C channels)

The affinity between positions is ``A^T B`` (N x N, contracted over channels)
with the softmax over the key axis, so each output position is a convex
combination of value vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError

RECOVERY_INIT_SCALE = 0.01


@dataclass
class ClassEmbedding:
    e_vce: torch.Tensor  # (B,) 2C x Hf x Wf

    def __post_init__(self):
        if not torch.isfinite(self.e_vce).all():
            raise ContractError("class embedding contains NaN or Inf")

    @property
    def channels(self) -> int:
        return self.e_vce.shape[-3]


def non_local_attention(f_a: torch.Tensor, f_b: torch.Tensor, f_c: torch.Tensor):
    """Attention over flattened positions.

    ``f_a``, ``f_b``, ``f_c`` are ``(..., c, N)``. Returns ``(out, attn)`` with
    ``attn[..., i, j] = softmax_j(sum_k f_a[k, i] f_b[k, j])`` and
    ``out[..., :, i] = sum_j attn[i, j] f_c[:, j]``.
    """
    affinity = f_a.transpose(-1, -2) @ f_b
    affinity = affinity - affinity.amax(dim=-1, keepdim=True)
    weights = affinity.exp()
    attn = weights / weights.sum(dim=-1, keepdim=True)
    return f_c @ attn.transpose(-1, -2), attn


class SpatialAttention(nn.Module):
    def __init__(self, channels: int, in_expansion: int = 5):
        super().__init__()
        if channels <= 0 or channels % 2:
            raise ConfigError(f"SAM needs a positive even channel count, got {channels}")
        c, half = channels, channels // 2
        self.channels = c
        self.in_channels = in_expansion * c
        self.compress1 = nn.Conv2d(self.in_channels, c, 1)
        self.compress2 = nn.Conv2d(c, half, 1)
        self.key_a = nn.Conv2d(half, half, 1)
        self.key_b = nn.Conv2d(half, half, 1)
        self.value = nn.Conv2d(half, half, 1)
        self.recover = nn.Conv2d(half, c, 1)
        self.direct = nn.Conv2d(self.in_channels, c, 3, padding=1)
        self.relu = nn.ReLU()
        with torch.no_grad():
            self.recover.weight.mul_(RECOVERY_INIT_SCALE)

    @property
    def out_channels(self) -> int:
        return 2 * self.channels

    def compress(self, o_m: torch.Tensor) -> torch.Tensor:
        if o_m.shape[-3] != self.in_channels:
            raise ContractError(f"expected {self.in_channels} input channels, got {o_m.shape[-3]}")
        return self.compress2(self.relu(self.compress1(o_m)))

    def branches(self, x: torch.Tensor):
        """Flattened ``(B, C/2, N)`` outputs of the three 1x1 branches."""
        return tuple(conv(x).flatten(-2) for conv in (self.key_a, self.key_b, self.value))

    def non_local(self, x: torch.Tensor, return_attention: bool = False):
        f_a, f_b, f_c = self.branches(x)
        out, attn = non_local_attention(f_a, f_b, f_c)
        out = out.reshape(x.shape)
        return (out, attn) if return_attention else out

    def forward(self, o_m: torch.Tensor) -> torch.Tensor:
        squeeze = o_m.ndim == 3
        if squeeze:
            o_m = o_m.unsqueeze(0)
        f_m = self.recover(self.non_local(self.compress(o_m)))
        e = torch.cat([f_m, self.relu(self.direct(o_m))], dim=1)
        return e.squeeze(0) if squeeze else e


def build_class_embedding(o_m: torch.Tensor, sam: SpatialAttention) -> ClassEmbedding:
    return ClassEmbedding(sam(o_m))
