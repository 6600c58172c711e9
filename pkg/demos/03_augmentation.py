"""
Building two-person samples out of single-person clips
======================================================

Crop around the face, optionally zoom out, then glue two crops side by side.
"""

import numpy as np

from afca_lab.augmentation import crop_clip, face_centered_min_crop, hconcat_pair, random_enlarge, select_batch_mode
from afca_lab.masks import global_face_bbox
from afca_lab.synthetic import raw_single_clip, single_person_clips
from afca_lab.toy_dit import ToyDiTConfig

rng = np.random.default_rng(0)

# A 1080p frame with a face near (800, 500) gets a 480x416 window around it.
window = face_centered_min_crop((1080, 1920), (800, 500))
print("minimal crop rows", (window.y0, window.y1), "cols", (window.x0, window.x1))
for _ in range(3):
    big = random_enlarge(window, (1080, 1920), rng)
    print(f"enlarged to {big.height}x{big.width} (ratio {big.height / big.width:.4f} vs {480 / 416:.4f})")

raw = raw_single_clip(seed=2)
cropped = crop_clip(raw, rng)
print("raw face box", global_face_bbox(raw.identities[0].face_track).bbox,
      "-> cropped", global_face_bbox(cropped.identities[0].face_track).bbox)

# Pairing puts clip a on the left; clip b's boxes move right by 416 px.
a, b = single_person_clips(2, ToyDiTConfig(), seed=0)
pair = hconcat_pair(a, b)
print("pair dims", pair.frame_dims, "prompt:", pair.text)
for ident in pair.identities:
    print(" ", ident.identity_id, global_face_bbox(ident.face_track).bbox)

# Each training batch flips one fair coin: pass through, or pair neighbours.
batch = single_person_clips(4, ToyDiTConfig(), seed=1)
modes = [select_batch_mode(batch, rng).mode for _ in range(2000)]
print("pair-mode fraction over 2000 draws:", modes.count("pair") / len(modes))
