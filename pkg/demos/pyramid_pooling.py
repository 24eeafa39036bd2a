"""
Pyramid pooling of class features
=================================

The multi-scale attention step averages the class feature map over 1x1,
2x2, 3x3 and 6x6 grids of regions, expands each back to the feature grid
and stacks the results with the original map.
"""

# %%
import torch

from smvcenet.mam import MultiScaleAttention, band_edges, pyramid_pool

# A 1-channel 6x9 ramp makes the region means easy to read.
x = torch.arange(54, dtype=torch.float64).reshape(1, 6, 9)
pooled = pyramid_pool(x)
for m in pooled.maps:
    print(m.shape[-1], "x", m.shape[-1], "regions\n", m[0].numpy().round(2))

# %%
# Region borders follow floor(k * L / r), so a 9-wide axis split in 6 gives
# bands of unequal width that still tile the axis.
print(band_edges(9, 6))

# %%
# The module output carries 5 copies of the channel axis: four pooled
# scales upsampled bilinearly, then the input itself.
mam = MultiScaleAttention()
out = mam(torch.randn(2, 8, 12, 12))
print(out.shape)  # (2, 40, 12, 12)
