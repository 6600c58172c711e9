"""Stage-1 concatenation augmentation.

Single-person clips are cropped to a 480x416 (height x width) window around the
face, optionally enlarged at the same aspect ratio, and paired side by side with
the clip at the next batch index to form a 480x832 pseudo two-person sample.
"""

from __future__ import annotations

import json
import math
import warnings
import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .masks import FaceTrack, global_face_bbox, load_face_track

CROP_H, CROP_W = 480, 416
PAIR_DIMS = (CROP_H, 2 * CROP_W)
PAIR_PROBABILITY = 0.5


@lru_cache(maxsize=None)
def dual_speaker_prompts() -> tuple[str, ...]:
    text = resources.files("afca_lab.resources").joinpath("dual_speaker_prompts.txt").read_text()
    return tuple(line.strip() for line in text.splitlines() if line.strip())


@dataclass
class ClipIdentity:
    identity_id: str
    audio: np.ndarray  # (A, d_af) pre-extracted audio features
    face_track: FaceTrack


@dataclass
class ClipSample:
    clip_id: str
    frame_dims: tuple[int, int]
    n_frames: int
    fps: float
    text: str
    identities: list[ClipIdentity]
    latents: np.ndarray | None = None  # (T_lat, R, C, channels), already in crop space
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.identities:
            raise ValueError(f"clip {self.clip_id!r} has no identity streams")
        for ident in self.identities:
            if ident.face_track.frame_dims != tuple(self.frame_dims):
                raise ValueError(f"face track of {ident.identity_id!r} has dims {ident.face_track.frame_dims}, "
                                 f"clip has {self.frame_dims}")


@dataclass(frozen=True)
class CropWindow:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    def contains(self, other: "CropWindow") -> bool:
        return self.x0 <= other.x0 and self.y0 <= other.y0 and self.x1 >= other.x1 and self.y1 >= other.y1

    def inside(self, frame_dims) -> bool:
        return 0 <= self.x0 < self.x1 <= frame_dims[1] and 0 <= self.y0 < self.y1 <= frame_dims[0]


def _place(center: float, size: int, lo: int, hi: int) -> int:
    """Start of a ``size`` span centred on ``center``, shifted into ``[lo, hi - size]``."""
    start = int(math.floor(center - size / 2))
    return min(max(start, lo), hi - size)


def face_centered_min_crop(frame_dims, face_center) -> CropWindow:
    h_px, w_px = frame_dims
    cx, cy = face_center
    if h_px < CROP_H or w_px < CROP_W:
        raise ValueError(f"frame {h_px}x{w_px} is smaller than the {CROP_H}x{CROP_W} minimal crop")
    if not (0 <= cx < w_px and 0 <= cy < h_px):
        raise ValueError(f"face centre {face_center} outside {h_px}x{w_px} frame")
    x0 = _place(cx, CROP_W, 0, w_px)
    y0 = _place(cy, CROP_H, 0, h_px)
    return CropWindow(x0, y0, x0 + CROP_W, y0 + CROP_H)


def max_enlarge_factor(window: CropWindow, frame_dims) -> float:
    return min(frame_dims[0] / window.height, frame_dims[1] / window.width)


def random_enlarge(window: CropWindow, frame_dims, rng: np.random.Generator) -> CropWindow:
    """Grow the window by a factor drawn uniformly from ``[1, max feasible]``.

    The result keeps the 480:416 aspect, contains ``window`` and stays in frame.
    """
    h_px, w_px = frame_dims
    f_max = max_enlarge_factor(window, frame_dims)
    factor = rng.uniform(1.0, f_max) if f_max > 1.0 else 1.0
    h = min(h_px, max(window.height, round(window.height * factor)))
    w = min(w_px, max(window.width, round(h * CROP_W / CROP_H)))
    cx = (window.x0 + window.x1) / 2
    cy = (window.y0 + window.y1) / 2
    x0 = min(max(_place(cx, w, 0, w_px), window.x1 - w), window.x0)
    y0 = min(max(_place(cy, h, 0, h_px), window.y1 - h), window.y0)
    return CropWindow(x0, y0, x0 + w, y0 + h)


def _map_box(box, window: CropWindow, scale_y: float, scale_x: float, dims) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    nx0 = int(math.floor((max(x0, window.x0) - window.x0) * scale_x))
    ny0 = int(math.floor((max(y0, window.y0) - window.y0) * scale_y))
    nx1 = int(math.ceil((min(x1, window.x1) - window.x0) * scale_x))
    ny1 = int(math.ceil((min(y1, window.y1) - window.y0) * scale_y))
    nx1, ny1 = min(max(nx1, nx0 + 1), dims[1]), min(max(ny1, ny0 + 1), dims[0])
    return min(nx0, nx1 - 1), min(ny0, ny1 - 1), nx1, ny1


def crop_clip(clip: ClipSample, rng: np.random.Generator | None = None) -> ClipSample:
    """Crop a single-person clip around its face and resize the window to 480x416.

    Only the face track is transformed; latents are expected in crop space already.
    """
    if len(clip.identities) != 1:
        raise ValueError(f"crop_clip expects a single-person clip, {clip.clip_id!r} has {len(clip.identities)}")
    ident = clip.identities[0]
    x0, y0, x1, y1 = global_face_bbox(ident.face_track).bbox
    window = face_centered_min_crop(clip.frame_dims, ((x0 + x1) / 2, (y0 + y1) / 2))
    if rng is not None:
        window = random_enlarge(window, clip.frame_dims, rng)
    dims = (CROP_H, CROP_W)
    sy, sx = CROP_H / window.height, CROP_W / window.width
    boxes = tuple(_map_box(b, window, sy, sx, dims) for b in ident.face_track.boxes)
    track = FaceTrack(boxes, ident.identity_id, dims)
    meta = dict(clip.meta, crop_window=[window.x0, window.y0, window.x1, window.y1])
    return replace(clip, frame_dims=dims, identities=[ClipIdentity(ident.identity_id, ident.audio, track)],
                   meta=meta)


def _trim_identity(ident: ClipIdentity, n_frames: int, n_audio: int, x_offset: int, dims) -> ClipIdentity:
    boxes = tuple((x0 + x_offset, y0, x1 + x_offset, y1) for x0, y0, x1, y1 in ident.face_track.boxes[:n_frames])
    return ClipIdentity(ident.identity_id, ident.audio[:n_audio], FaceTrack(boxes, ident.identity_id, dims))


def _pair_prompt(a: ClipSample, b: ClipSample) -> str:
    prompts = dual_speaker_prompts()
    key = "\x1f".join(sorted([a.clip_id, b.clip_id])).encode()
    return prompts[zlib.crc32(key) % len(prompts)]


def hconcat_pair(a: ClipSample, b: ClipSample) -> ClipSample:
    """Place ``a`` on the left and ``b`` on the right of a 480x832 sample.

    Both clips are trimmed to the shorter one; each identity keeps its own audio.
    """
    for clip in (a, b):
        if len(clip.identities) != 1:
            raise ValueError(f"clip {clip.clip_id!r} is not single-person")
        if tuple(clip.frame_dims) != (CROP_H, CROP_W):
            raise ValueError(f"clip {clip.clip_id!r} is {clip.frame_dims}, expected a {CROP_H}x{CROP_W} crop")
    if a.fps != b.fps:
        raise ValueError(f"fps mismatch: {a.fps} vs {b.fps}")
    n_frames = min(a.n_frames, b.n_frames)
    n_audio = min(a.identities[0].audio.shape[0], b.identities[0].audio.shape[0])
    latents = None
    if a.latents is not None and b.latents is not None:
        t_lat = min(a.latents.shape[0], b.latents.shape[0])
        latents = np.concatenate([a.latents[:t_lat], b.latents[:t_lat]], axis=2)
    identities = [
        _trim_identity(a.identities[0], n_frames, n_audio, 0, PAIR_DIMS),
        _trim_identity(b.identities[0], n_frames, n_audio, CROP_W, PAIR_DIMS),
    ]
    return ClipSample(f"{a.clip_id}+{b.clip_id}", PAIR_DIMS, n_frames, a.fps, _pair_prompt(a, b), identities,
                      latents, {"pair": [a.clip_id, b.clip_id]})


@dataclass
class BatchDraw:
    samples: list[ClipSample]
    mode: str  # "single" | "pair"
    n_source: int
    n_items: int
    dropped: list[str] = field(default_factory=list)


def select_batch_mode(batch: Sequence[ClipSample], rng: np.random.Generator,
                      p_pair: float = PAIR_PROBABILITY) -> BatchDraw:
    """With probability ``p_pair`` pair each even index with the next one, else pass through.

    One uniform draw per call; pairing itself is deterministic.
    """
    batch = list(batch)
    if rng.random() >= p_pair:
        return BatchDraw(batch, "single", len(batch), len(batch))
    dropped = []
    if len(batch) % 2:
        dropped = [batch[-1].clip_id]
        warnings.warn(f"odd batch of {len(batch)} in pair mode; dropping {dropped[0]!r}", stacklevel=2)
        batch = batch[:-1]
    pairs = [hconcat_pair(batch[i], batch[i + 1]) for i in range(0, len(batch), 2)]
    return BatchDraw(pairs, "pair", len(batch), len(pairs), dropped)


def load_manifest_item(item: dict, base_dir=None) -> ClipSample:
    """Build a clip from a manifest item of paths to pre-extracted features.

    ``speakers`` lists one ``{identity_id, audio_path, face_track_path}`` entry per face.
    """
    base = Path(base_dir) if base_dir is not None else Path(".")

    def _p(value):
        p = Path(value)
        return p if p.is_absolute() else base / p

    identities = [
        ClipIdentity(str(s["identity_id"]), np.load(_p(s["audio_path"])), load_face_track(_p(s["face_track_path"])))
        for s in item["speakers"]
    ]
    latents = np.load(_p(item["latent_path"])) if item.get("latent_path") else None
    return ClipSample(str(item["clip_id"]), tuple(item["frame_dims"]), int(item["n_frames"]),
                      float(item.get("fps", 24.0)), str(item.get("text", "")), identities, latents,
                      {"video_path": item.get("video_path")})


def load_manifest(path) -> list[ClipSample]:
    path = Path(path)
    text = path.read_text()
    items = json.loads(text) if text.lstrip().startswith("[") else [json.loads(l) for l in text.splitlines() if l.strip()]
    return [load_manifest_item(it, path.parent) for it in items]
