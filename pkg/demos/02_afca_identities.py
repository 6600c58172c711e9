"""
Two speakers, one shared attention layer
========================================

Each identity attends with the same weights, gated to its own face region.
The results are summed onto the block input, so identity order does not matter.
"""

import torch

from afca_lab.afca import (AttentionWeights, GridShape, IdentityStream, aggregate_identities,
                           identity_contributions)
from afca_lab.masks import PixelMask

torch.manual_seed(0)
dtype = torch.float64

# A 3-frame latent grid of 4x8 patches (each patch 120x104 px), i.e. a 480x832 frame.
grid = GridShape(frames=3, rows=4, cols=8)
patch = (120, 104)
frame_dims = (480, 832)
weights = AttentionWeights.init(d_query=16, d_kv=8, d_model=16, heads=2, dtype=dtype)
h = torch.randn(grid.n_tokens, 16, dtype=dtype)

left = IdentityStream.build("left", torch.randn(9, 8, dtype=dtype), torch.randn(1, 8, dtype=dtype),
                            PixelMask((60, 80, 300, 400), frame_dims))
right = IdentityStream.build("right", torch.randn(9, 8, dtype=dtype), torch.randn(1, 8, dtype=dtype),
                             PixelMask((500, 60, 760, 420), frame_dims))

parts = identity_contributions(h, grid, [left, right], weights, patch=patch)
for stream, part in zip((left, right), parts):
    active = (part.abs().sum(dim=1) > 0).reshape(grid.frames, grid.rows, grid.cols)[0].int()
    print(f"{stream.identity_id}: tokens touched in frame 0")
    print(active.numpy())

forward = aggregate_identities(h, grid, [left, right], weights, patch=patch)
backward = aggregate_identities(h, grid, [right, left], weights, patch=patch)
print("order swap max diff:", float((forward - backward).abs().max()))

# Changing the right speaker's audio leaves the left speaker's tokens alone.
louder = right.with_tokens(audio=right.audio.tokens * 3)
changed = aggregate_identities(h, grid, [left, louder], weights, patch=patch)
left_rows = parts[0].abs().sum(dim=1) > 0
print("left rows unchanged:", bool(torch.equal(forward[left_rows], changed[left_rows])))
