"""Face boxes to token masks.

Boxes are ``(x0, y0, x1, y1)`` half-open pixel rectangles; frame dims are ``(H, W)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Box = tuple[int, int, int, int]


def _check_box(box, frame_dims) -> Box:
    x0, y0, x1, y1 = (int(v) for v in box)
    h_px, w_px = frame_dims
    if not (0 <= x0 < x1 <= w_px and 0 <= y0 < y1 <= h_px):
        raise ValueError(f"box {box} is empty or outside a {h_px}x{w_px} frame")
    return x0, y0, x1, y1


@dataclass(frozen=True)
class PixelMask:
    bbox: Box
    frame_dims: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "bbox", _check_box(self.bbox, self.frame_dims))
        object.__setattr__(self, "frame_dims", (int(self.frame_dims[0]), int(self.frame_dims[1])))


@dataclass(frozen=True)
class FaceTrack:
    boxes: tuple[Box, ...]
    identity_id: str
    frame_dims: tuple[int, int]

    def __post_init__(self):
        dims = (int(self.frame_dims[0]), int(self.frame_dims[1]))
        object.__setattr__(self, "frame_dims", dims)
        object.__setattr__(self, "boxes", tuple(_check_box(b, dims) for b in self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    def centers_x(self) -> np.ndarray:
        b = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        return (b[:, 0] + b[:, 2]) / 2

    def to_json(self) -> dict:
        return {"identity_id": self.identity_id, "frame_dims": list(self.frame_dims),
                "boxes": [list(b) for b in self.boxes]}

    @classmethod
    def from_json(cls, obj: dict) -> "FaceTrack":
        return cls(tuple(tuple(b) for b in obj["boxes"]), str(obj["identity_id"]), tuple(obj["frame_dims"]))


def load_face_track(path) -> FaceTrack:
    return FaceTrack.from_json(json.loads(Path(path).read_text()))


@dataclass
class TokenMask:
    values: np.ndarray  # float {0,1}, length frames*rows*cols
    frames: int
    rows: int
    cols: int

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.frames, self.rows, self.cols)


def global_face_bbox(track: FaceTrack) -> PixelMask:
    """Smallest box containing the face in every frame of the track."""
    if not track.boxes:
        raise ValueError(f"face track {track.identity_id!r} has no boxes")
    b = np.asarray(track.boxes)
    box = (b[:, 0].min(), b[:, 1].min(), b[:, 2].max(), b[:, 3].max())
    return PixelMask(box, track.frame_dims)


def dilate_bbox(mask: PixelMask, margin_px: int) -> PixelMask:
    if margin_px < 0:
        raise ValueError(f"margin must be non-negative, got {margin_px}")
    h_px, w_px = mask.frame_dims
    x0, y0, x1, y1 = mask.bbox
    return PixelMask(
        (max(0, x0 - margin_px), max(0, y0 - margin_px), min(w_px, x1 + margin_px), min(h_px, y1 + margin_px)),
        mask.frame_dims,
    )


def token_mask_from_bbox(mask: PixelMask, n_frames: int, patch: tuple[int, int], pad: bool = False) -> TokenMask:
    """Mark every patch that overlaps the box, replicated over all latent frames.

    With ``pad=True`` frames not divisible by the patch are padded up to the next
    multiple; padding never lies inside the box.
    """
    p_h, p_w = patch
    h_px, w_px = mask.frame_dims
    if n_frames < 1 or p_h < 1 or p_w < 1:
        raise ValueError(f"need n_frames>=1 and positive patch, got {n_frames}, {patch}")
    if not pad and (h_px % p_h or w_px % p_w):
        raise ValueError(f"frame {h_px}x{w_px} is not divisible by patch {p_h}x{p_w}; pass pad=True")
    rows, cols = math.ceil(h_px / p_h), math.ceil(w_px / p_w)
    x0, y0, x1, y1 = mask.bbox
    r = np.arange(rows)
    c = np.arange(cols)
    hit_r = (r * p_h < y1) & ((r + 1) * p_h > y0)
    hit_c = (c * p_w < x1) & ((c + 1) * p_w > x0)
    frame = np.outer(hit_r, hit_c).astype(float)
    values = np.broadcast_to(frame, (n_frames, rows, cols)).reshape(-1).copy()
    return TokenMask(values, n_frames, rows, cols)
