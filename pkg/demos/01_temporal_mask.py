"""
Which audio does each latent frame hear?
========================================

The first latent frame sees every audio token; later frames see a window of
four. Face tokens are visible everywhere.
"""

import numpy as np

from afca_lab import AudioShortfallError, build_temporal_mask

mask = build_temporal_mask(n_frames=4, n_audio=13, n_face=1)
print("rows = latent frames, columns = 13 audio tokens | 1 face token")
for t, row in enumerate(mask.allow.astype(int)):
    audio, face = row[:mask.n_audio], row[mask.n_audio:]
    print(f"frame {t}: {''.join(map(str, audio))} | {''.join(map(str, face))}")

# Each audio token beyond the first frame is owned by exactly one later frame.
owners = mask.allow[1:, :12].sum(axis=0)
print("owners per audio token (frames >= 1):", owners)
assert np.all(owners == 1)

# Too little audio for the requested frames is refused with the minimum needed.
try:
    build_temporal_mask(n_frames=4, n_audio=10)
except AudioShortfallError as exc:
    print("refused:", exc)
