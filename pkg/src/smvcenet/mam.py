"""Multi-scale attention module: pyramid average pooling, re-expansion, concat.

For each ratio ``r`` in (1, 2, 3, 6) the rows of the input are cut into ``r``
contiguous bands at ``floor(k * H / r)`` (same for columns) and every cell of
the ``r x r`` output is the mean of its band intersection. Bands partition
the grid, so area-weighted cell means reproduce the global mean exactly.
(torch's ``adaptive_avg_pool2d`` lets windows overlap when ``r`` does not
divide the size; it agrees with this module only in the divisible case.)

The module has no learnable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, ShapeError

PYRAMID_RATIOS = (1, 2, 3, 6)
UPSAMPLE_MODES = ("bilinear", "nearest")


@dataclass
class PyramidPooled:
    maps: List[torch.Tensor]  # each (..., C, r, r)
    ratios: Tuple[int, ...] = PYRAMID_RATIOS

    def __post_init__(self):
        if len(self.maps) != len(self.ratios):
            raise ContractError("one pooled map per ratio expected")
        for m, r in zip(self.maps, self.ratios):
            if tuple(m.shape[-2:]) != (r, r):
                raise ContractError(f"pooled map for ratio {r} has grid {tuple(m.shape[-2:])}")

    @property
    def cells_per_channel(self) -> int:
        return sum(r * r for r in self.ratios)


def band_edges(size: int, ratio: int) -> List[int]:
    return [(k * size) // ratio for k in range(ratio + 1)]


def _band_matrix(size: int, ratio: int, dtype, device) -> torch.Tensor:
    """``ratio x size`` averaging matrix, row k = 1/len over band k."""
    edges = band_edges(size, ratio)
    mat = torch.zeros(ratio, size, dtype=dtype, device=device)
    for k in range(ratio):
        mat[k, edges[k]:edges[k + 1]] = 1.0 / (edges[k + 1] - edges[k])
    return mat


def region_pool(x: torch.Tensor, ratio: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    rows = _band_matrix(h, ratio, x.dtype, x.device)
    cols = _band_matrix(w, ratio, x.dtype, x.device)
    return torch.einsum("ih,...hw,jw->...ij", rows, x, cols)


def pyramid_pool(i_class: torch.Tensor, ratios: Sequence[int] = PYRAMID_RATIOS) -> PyramidPooled:
    h, w = i_class.shape[-2:]
    if h < max(ratios) or w < max(ratios):
        raise ShapeError(f"feature grid {h}x{w} is smaller than the largest ratio {max(ratios)}")
    return PyramidPooled([region_pool(i_class, r) for r in ratios], tuple(ratios))


def expand_and_concat(pooled: PyramidPooled, i_class: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Upsample every pooled map to the input grid and stack
    ``[ratio 1, 2, 3, 6, identity]`` on the channel axis (5C channels)."""
    if mode not in UPSAMPLE_MODES:
        raise ConfigError(f"upsample mode must be one of {UPSAMPLE_MODES}", "mam.upsample")
    c = i_class.shape[-3]
    size = tuple(i_class.shape[-2:])
    lead = i_class.shape[:-3]
    groups = []
    for m in pooled.maps:
        if m.shape[-3] != c:
            raise ContractError(f"pooled map has {m.shape[-3]} channels, input has {c}")
        flat = m.reshape(-1, c, *m.shape[-2:])
        if mode == "bilinear":
            up = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
        else:
            up = F.interpolate(flat, size=size, mode="nearest")
        groups.append(up.reshape(*lead, c, *size))
    groups.append(i_class)
    return torch.cat(groups, dim=-3)


class MultiScaleAttention(nn.Module):
    def __init__(self, ratios: Sequence[int] = PYRAMID_RATIOS, upsample: str = "bilinear"):
        super().__init__()
        if upsample not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample mode must be one of {UPSAMPLE_MODES}", "mam.upsample")
        self.ratios = tuple(ratios)
        self.upsample = upsample

    @property
    def expansion(self) -> int:
        return len(self.ratios) + 1

    def forward(self, i_class: torch.Tensor) -> torch.Tensor:
        return expand_and_concat(pyramid_pool(i_class, self.ratios), i_class, self.upsample)
