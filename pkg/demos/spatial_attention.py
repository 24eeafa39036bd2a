"""
Spatial attention and the class embedding
=========================================

The stacked pyramid features are compressed to half width, passed through
a non-local block whose affinity rows are a softmax over all positions,
and recovered to full width. A direct 3x3 path runs alongside; the two
are concatenated into the class embedding.
"""

# %%
import torch

from smvcenet.mam import MultiScaleAttention
from smvcenet.sam import SpatialAttention, build_class_embedding

torch.manual_seed(0)
c = 8
i_class = torch.randn(1, c, 10, 10)
o_m = MultiScaleAttention()(i_class)
sam = SpatialAttention(c)

# %%
# Each row of the affinity matrix is a distribution over the 100 positions.
compressed = sam.compress(o_m)
out, attn = sam.non_local(compressed, return_attention=True)
print("compressed", tuple(compressed.shape), "attention", tuple(attn.shape))
print("row sums", attn.sum(-1).min().item(), attn.sum(-1).max().item())
print("most attended position for query 0:", attn[0, 0].argmax().item())

# %%
# The embedding has twice the class-feature width.
embedding = build_class_embedding(o_m[0], sam)
print("embedding channels", embedding.channels, tuple(embedding.e_vce.shape))
