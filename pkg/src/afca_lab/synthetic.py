"""Seeded synthetic clips for toy training and demos.

Latents are built so the face-region tokens of each latent frame depend on the
audio window bound to that frame, giving the audio path something to learn.
"""

from __future__ import annotations

import numpy as np

from .augmentation import CROP_H, CROP_W, ClipIdentity, ClipSample
from .masks import FaceTrack, global_face_bbox, token_mask_from_bbox
from .seeding import rng_for
from .toy_dit import ToyDiTConfig

FPS = 24.0


def _audio_windows(audio: np.ndarray, n_frames: int) -> np.ndarray:
    """Mean audio feature seen by each latent frame (all tokens for frame 0, 4-token windows after)."""
    out = [audio.mean(axis=0)]
    for t in range(1, n_frames):
        out.append(audio[4 * (t - 1):4 * t].mean(axis=0))
    return np.stack(out)


def _face_track(rng, identity_id: str, n_frames: int, dims, x_range) -> FaceTrack:
    h_px, _ = dims
    w = int(rng.integers(80, 140))
    h = int(rng.integers(100, 170))
    x0 = int(rng.integers(x_range[0], x_range[1] - w))
    y0 = int(rng.integers(0, h_px - h))
    boxes = []
    for _ in range(n_frames):
        dx, dy = (int(v) for v in rng.integers(-4, 5, size=2))
        bx0 = min(max(x0 + dx, x_range[0]), x_range[1] - w)
        by0 = min(max(y0 + dy, 0), h_px - h)
        boxes.append((bx0, by0, bx0 + w, by0 + h))
    return FaceTrack(tuple(boxes), identity_id, dims)


def _latents(rng, cfg: ToyDiTConfig, dims, identities: list[ClipIdentity], projection: np.ndarray) -> np.ndarray:
    rows, cols = dims[0] // cfg.patch[0], dims[1] // cfg.patch[1]
    lat = 0.3 * rng.standard_normal((cfg.latent_frames, rows, cols, cfg.latent_channels))
    for ident in identities:
        region = token_mask_from_bbox(global_face_bbox(ident.face_track), 1, cfg.patch).grid()[0] > 0
        drive = np.tanh(_audio_windows(ident.audio, cfg.latent_frames) @ projection)  # (T, channels)
        lat[:, region, :] += drive[:, None, :]
    return lat


def _projection(cfg: ToyDiTConfig, seed: int) -> np.ndarray:
    return rng_for(seed, "audio-projection").standard_normal((cfg.d_af, cfg.latent_channels)) * 1.5


def single_person_clips(n: int, cfg: ToyDiTConfig, seed: int = 0) -> list[ClipSample]:
    """``n`` single-person clips already cropped to 480x416."""
    dims = (CROP_H, CROP_W)
    proj = _projection(cfg, seed)
    clips = []
    for i in range(n):
        rng = rng_for(seed, "single", i)
        ident_id = f"s{i:03d}"
        n_frames = cfg.n_audio_frames
        audio = rng.standard_normal((n_frames, cfg.d_af))
        ident = ClipIdentity(ident_id, audio, _face_track(rng, ident_id, n_frames, dims, (0, CROP_W)))
        lat = _latents(rng, cfg, dims, [ident], proj)
        clips.append(ClipSample(f"single-{i:03d}", dims, n_frames, FPS, f"a person is talking, clip {i}",
                                [ident], lat))
    return clips


def two_person_clips(n: int, cfg: ToyDiTConfig, seed: int = 0) -> list[ClipSample]:
    """``n`` native 480x832 two-person clips with one face per half."""
    dims = (CROP_H, 2 * CROP_W)
    proj = _projection(cfg, seed)
    clips = []
    for i in range(n):
        rng = rng_for(seed, "multi", i)
        n_frames = cfg.n_audio_frames
        idents = []
        for k, x_range in enumerate([(0, CROP_W), (CROP_W, 2 * CROP_W)]):
            ident_id = f"m{i:03d}-{k}"
            audio = rng.standard_normal((n_frames, cfg.d_af)) * (1.0 if k == i % 2 else 0.2)
            idents.append(ClipIdentity(ident_id, audio, _face_track(rng, ident_id, n_frames, dims, x_range)))
        lat = _latents(rng, cfg, dims, idents, proj)
        clips.append(ClipSample(f"multi-{i:03d}", dims, n_frames, FPS, "two people are having a conversation",
                                idents, lat))
    return clips


def raw_single_clip(seed: int = 0, dims=(1080, 1920), n_frames: int = 9, d_af: int = 8) -> ClipSample:
    """An uncropped high-resolution clip for crop demos."""
    rng = rng_for(seed, "raw")
    track = _face_track(rng, "raw", n_frames, dims, (0, dims[1]))
    audio = rng.standard_normal((n_frames, d_af))
    return ClipSample("raw", tuple(dims), n_frames, FPS, "a person is talking",
                      [ClipIdentity("raw", audio, track)])
