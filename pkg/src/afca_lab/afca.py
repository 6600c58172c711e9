"""Audio-Face Cross Attention.

Video queries attend to the concatenated ``[audio tokens; face tokens]`` of one
identity under a temporal allow-mask, and the result is gated row-wise by that
identity's token mask. Several identities are handled by running the same
layer once per identity and summing the gated outputs onto the hidden state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .masks import PixelMask, TokenMask, token_mask_from_bbox

# Tokens after the first latent frame bound to each subsequent latent frame.
AUDIO_TOKENS_PER_FRAME = 4
MASK_FILL = -1e9


class ShapeError(ValueError):
    pass


class AudioShortfallError(ValueError):
    pass


class GridShape(NamedTuple):
    frames: int
    rows: int
    cols: int

    @property
    def n_tokens(self) -> int:
        return self.frames * self.rows * self.cols


@dataclass
class VideoTokenGrid:
    """Latent video tokens of shape ``(frames, rows, cols, channels)``.

    Flattening puts the latent frame outermost, then row, then column.
    """

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ShapeError(f"grid data must be 4-D with positive sizes, got {tuple(self.data.shape)}")

    @property
    def shape(self) -> GridShape:
        t, r, c, _ = self.data.shape
        return GridShape(t, r, c)

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def flatten(self) -> torch.Tensor:
        return self.data.reshape(-1, self.channels)

    @classmethod
    def unflatten(cls, tokens: torch.Tensor, shape: GridShape) -> "VideoTokenGrid":
        if tokens.shape[0] != shape.n_tokens:
            raise ShapeError(f"expected {shape.n_tokens} tokens for grid {tuple(shape)}, got {tokens.shape[0]}")
        return cls(tokens.reshape(shape.frames, shape.rows, shape.cols, -1))


@dataclass
class AudioTokenStream:
    tokens: torch.Tensor  # (A, d_af)
    identity_id: str

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"audio tokens must be (A>=1, d_af), got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError(f"audio tokens for {self.identity_id!r} contain non-finite values")


@dataclass
class FaceTokens:
    tokens: torch.Tensor  # (F, d_af)
    identity_id: str

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"face tokens must be (F>=1, d_af), got {tuple(self.tokens.shape)}")


@dataclass
class IdentityStream:
    """One drivable identity: its audio, its face token(s) and its face region.

    ``pixel_mask=None`` means the identity covers the whole frame.
    """

    audio: AudioTokenStream
    face: FaceTokens
    pixel_mask: PixelMask | None
    identity_id: str

    def __post_init__(self):
        if self.audio.identity_id != self.identity_id or self.face.identity_id != self.identity_id:
            raise ValueError(
                f"identity mismatch: stream {self.identity_id!r}, audio {self.audio.identity_id!r}, "
                f"face {self.face.identity_id!r}"
            )

    @classmethod
    def build(cls, identity_id: str, audio: torch.Tensor, face: torch.Tensor,
              pixel_mask: PixelMask | None = None) -> "IdentityStream":
        return cls(AudioTokenStream(audio, identity_id), FaceTokens(face, identity_id), pixel_mask, identity_id)

    def with_tokens(self, audio: torch.Tensor | None = None, face: torch.Tensor | None = None) -> "IdentityStream":
        return IdentityStream.build(
            self.identity_id,
            self.audio.tokens if audio is None else audio,
            self.face.tokens if face is None else face,
            self.pixel_mask,
        )


@dataclass
class TemporalAttentionMask:
    allow: np.ndarray  # bool, (frames, A + F)
    n_audio: int
    n_face: int


@dataclass
class AttentionWeights:
    """Projections for one multi-head attention layer.

    ``w_q``: (d_query, h*d_k), ``w_k``: (d_kv, h*d_k), ``w_v``: (d_kv, h*d_v),
    ``w_o``: (h*d_v, d_model). Within a block the same instance serves every identity.
    """

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    heads: int

    def __post_init__(self):
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise ShapeError(f"query/key widths differ: {self.w_q.shape[1]} vs {self.w_k.shape[1]}")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise ShapeError(f"key/value input dims differ: {self.w_k.shape[0]} vs {self.w_v.shape[0]}")
        if self.w_v.shape[1] != self.w_o.shape[0]:
            raise ShapeError(f"value width {self.w_v.shape[1]} does not feed output rows {self.w_o.shape[0]}")
        if self.w_q.shape[1] % self.heads or self.w_v.shape[1] % self.heads:
            raise ShapeError(f"projection widths not divisible by {self.heads} heads")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.heads

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1] // self.heads

    @classmethod
    def init(cls, d_query: int, d_kv: int, d_model: int, heads: int, d_head: int | None = None, *,
             generator: torch.Generator | None = None, dtype=torch.float64) -> "AttentionWeights":
        d_head = d_head or max(1, d_model // heads)
        width = d_head * heads

        def _w(rows, cols):
            return torch.randn(rows, cols, generator=generator, dtype=dtype) / math.sqrt(rows)

        return cls(_w(d_query, width), _w(d_kv, width), _w(d_kv, width), _w(width, d_model), heads)

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


AfcaWeights = AttentionWeights


def build_temporal_mask(n_frames: int, n_audio: int, n_face: int = 1) -> TemporalAttentionMask:
    """Allow-matrix of latent frames over ``[audio | face]`` key columns.

    Frame 0 sees every audio token; frame ``t >= 1`` sees audio tokens
    ``[4(t-1), 4t)``. Face columns are visible to every frame.
    """
    if n_frames < 1 or n_audio < 1 or n_face < 0:
        raise ValueError(f"need n_frames>=1, n_audio>=1, n_face>=0; got {n_frames}, {n_audio}, {n_face}")
    required = AUDIO_TOKENS_PER_FRAME * (n_frames - 1)
    if n_audio < required:
        raise AudioShortfallError(
            f"{n_frames} latent frames require at least {required} audio tokens, got {n_audio}"
        )
    allow = np.zeros((n_frames, n_audio + n_face), dtype=bool)
    allow[0, :n_audio] = True
    for t in range(1, n_frames):
        allow[t, AUDIO_TOKENS_PER_FRAME * (t - 1):AUDIO_TOKENS_PER_FRAME * t] = True
    allow[:, n_audio:] = True
    return TemporalAttentionMask(allow, n_audio, n_face)


def audio_face_kv(stream: IdentityStream, weights: AttentionWeights) -> tuple[torch.Tensor, torch.Tensor]:
    audio, face = stream.audio.tokens, stream.face.tokens
    if audio.shape[1] != face.shape[1]:
        raise ShapeError(f"audio channels ({audio.shape[1]}) != face channels ({face.shape[1]})")
    if audio.shape[1] != weights.w_k.shape[0]:
        raise ShapeError(f"conditioning channels ({audio.shape[1]}) != key projection input ({weights.w_k.shape[0]})")
    cond = torch.cat([audio, face], dim=0)
    return cond @ weights.w_k, cond @ weights.w_v


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
           allow: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention over projected tokens; returns concatenated heads.

    ``allow`` is a boolean (N_q, N_k) matrix. Disallowed keys get exactly zero weight.
    """
    n_q, n_k = q.shape[0], k.shape[0]
    d_k = q.shape[1] // heads
    qh = q.reshape(n_q, heads, d_k).transpose(0, 1)
    kh = k.reshape(n_k, heads, d_k).transpose(0, 1)
    vh = v.reshape(n_k, heads, -1).transpose(0, 1)
    scores = qh @ kh.transpose(1, 2) / math.sqrt(d_k)
    if allow is None:
        probs = torch.softmax(scores, dim=-1)
    else:
        if not bool(allow.any(dim=-1).all()):
            raise ValueError("attention mask has a row with no allowed keys")
        scores = scores.masked_fill(~allow, MASK_FILL)
        probs = torch.softmax(scores, dim=-1) * allow
        probs = probs / probs.sum(dim=-1, keepdim=True)
    return (probs @ vh).transpose(0, 1).reshape(n_q, -1)


def _query_allow(temporal: TemporalAttentionMask, shape: GridShape) -> torch.Tensor:
    if temporal.allow.shape[0] != shape.frames:
        raise ShapeError(f"temporal mask has {temporal.allow.shape[0]} rows, grid has {shape.frames} frames")
    per_frame = torch.as_tensor(temporal.allow)
    return per_frame.repeat_interleave(shape.rows * shape.cols, dim=0)


def masked_mhca(query_grid: VideoTokenGrid, k_af: torch.Tensor, v_af: torch.Tensor,
                temporal_mask: TemporalAttentionMask, weights: AttentionWeights) -> torch.Tensor:
    """Multi-head cross attention of video tokens onto one identity's keys/values.

    Every token of latent frame ``t`` uses row ``t`` of the temporal mask.
    Returns ``(N, d_model)`` in grid flatten order.
    """
    if k_af.shape[0] != temporal_mask.allow.shape[1]:
        raise ShapeError(f"{k_af.shape[0]} keys but temporal mask has {temporal_mask.allow.shape[1]} columns")
    q = query_grid.flatten() @ weights.w_q
    allow = _query_allow(temporal_mask, query_grid.shape)
    return attend(q, k_af, v_af, weights.heads, allow) @ weights.w_o


def _as_row_gate(token_mask, n_tokens: int, like: torch.Tensor) -> torch.Tensor:
    values = token_mask.values if isinstance(token_mask, TokenMask) else token_mask
    gate = torch.as_tensor(np.asarray(values) if not torch.is_tensor(values) else values,
                           dtype=like.dtype, device=like.device).reshape(-1)
    if gate.shape[0] != n_tokens:
        raise ShapeError(f"token mask has length {gate.shape[0]}, expected {n_tokens}")
    return gate[:, None]


def afca_forward(h: torch.Tensor, grid: GridShape, stream: IdentityStream, weights: AttentionWeights,
                 token_mask) -> torch.Tensor:
    """Gated AFCA output for one identity: ``token_mask ⊙ MHCA(h W_Q, K_af, V_af)``."""
    if h.shape[0] != grid.n_tokens:
        raise ShapeError(f"hidden state has {h.shape[0]} rows, grid {tuple(grid)} has {grid.n_tokens}")
    gate = _as_row_gate(token_mask, grid.n_tokens, h)
    k_af, v_af = audio_face_kv(stream, weights)
    temporal = build_temporal_mask(grid.frames, stream.audio.tokens.shape[0], stream.face.tokens.shape[0])
    attn_out = masked_mhca(VideoTokenGrid.unflatten(h, grid), k_af, v_af, temporal, weights)
    return gate * attn_out


def stream_token_mask(stream: IdentityStream, grid: GridShape, patch: tuple[int, int] | None = None) -> np.ndarray:
    """Token mask of a stream's face region; whole grid when it has no pixel mask."""
    if stream.pixel_mask is None:
        return np.ones(grid.n_tokens)
    if patch is None:
        h_px, w_px = stream.pixel_mask.frame_dims
        if h_px % grid.rows or w_px % grid.cols:
            raise ShapeError(f"cannot infer patch size for frame {h_px}x{w_px} on a {grid.rows}x{grid.cols} grid")
        patch = (h_px // grid.rows, w_px // grid.cols)
    mask = token_mask_from_bbox(stream.pixel_mask, grid.frames, patch, pad=True)
    if (mask.rows, mask.cols) != (grid.rows, grid.cols):
        raise ShapeError(f"pixel mask tokenizes to {mask.rows}x{mask.cols}, grid is {grid.rows}x{grid.cols}")
    return mask.values


def identity_contributions(h: torch.Tensor, grid: GridShape, streams: Sequence[IdentityStream],
                           weights: AttentionWeights, *, patch: tuple[int, int] | None = None,
                           token_masks: Sequence | None = None) -> list[torch.Tensor]:
    """Per-identity gated outputs, each computed from the same ``h``."""
    ids = [s.identity_id for s in streams]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValueError(f"duplicate identity ids: {dupes}")
    if token_masks is not None and len(token_masks) != len(streams):
        raise ValueError(f"{len(token_masks)} token masks for {len(streams)} streams")
    out = []
    for k, stream in enumerate(streams):
        mask = token_masks[k] if token_masks is not None else stream_token_mask(stream, grid, patch)
        out.append(afca_forward(h, grid, stream, weights, mask))
    return out


def aggregate_identities(h_in: torch.Tensor, grid: GridShape, streams: Sequence[IdentityStream],
                         weights: AttentionWeights, *, patch: tuple[int, int] | None = None,
                         token_masks: Sequence | None = None) -> torch.Tensor:
    """``h_in + sum_k AFCA_out^(k)`` with one shared weight set; no normalization by the identity count."""
    out = h_in
    for contribution in identity_contributions(h_in, grid, streams, weights, patch=patch, token_masks=token_masks):
        out = out + contribution
    return out
