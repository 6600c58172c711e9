"""A miniature DiT with AFCA conditioning, its two-stage training loop and CFG sampling.

Each block runs, on a pre-normalised hidden state, self-attention, then text,
reference-image and per-identity AFCA cross attention added in parallel, then an FFN:

    h = h + SelfAttn(LN(h))
    h = h + TextAttn(LN(h)) + RefAttn(LN(h)) + sum_k AFCA_k(LN(h))
    h = h + FFN(LN(h))
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .afca import (AttentionWeights, GridShape, IdentityStream, VideoTokenGrid, attend,
                   identity_contributions)
from .augmentation import ClipSample, select_batch_mode
from .masks import dilate_bbox, global_face_bbox

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ScheduleContractError(ValueError):
    pass


@dataclass
class ToyDiTConfig:
    depth: int = 2
    d_model: int = 16
    heads: int = 2
    d_af: int = 8
    latent_channels: int = 4
    patch: tuple[int, int] = (120, 104)
    latent_frames: int = 3
    face_tokens: int = 1
    ref_tokens: int = 4
    text_len: int = 512
    ffn_mult: int = 2
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr_stage1: float = 2e-5
    lr_stage2: float = 5e-6
    warmup_steps: int = 10
    weight_decay: float = 0.0
    stage1_steps: int = 200
    stage2_steps: int = 50
    batch_size: int = 4
    cfg_scale: float = 4.0
    mask_dilation_px: int = 0
    encoder_seed: int = 1234

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        for name in ("depth", "d_model", "heads", "d_af", "latent_channels", "latent_frames", "face_tokens",
                     "ref_tokens", "text_len", "ffn_mult", "diffusion_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.patch) < 1 or self.d_model % self.heads:
            raise ValueError("patch must be positive and d_model divisible by heads")
        if self.cfg_scale < 0 or self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ValueError("cfg_scale and learning rates must be non-negative")

    @classmethod
    def from_dict(cls, values: dict) -> "ToyDiTConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch"] = list(self.patch)
        return d

    @property
    def n_audio_frames(self) -> int:
        return 4 * (self.latent_frames - 1) + 1


# ---------------------------------------------------------------------------
# frozen-encoder stand-ins

class SyntheticEncoder:
    """Deterministic embeddings from content hashes; same seed and content, same output."""

    PAD = "<pad>"

    def __init__(self, seed: int, out_dim: int):
        self.seed = int(seed)
        self.out_dim = int(out_dim)

    def embed(self, content: str, n: int = 1, out_dim: int | None = None) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x1f{content}".encode(), digest_size=16).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        dim = out_dim or self.out_dim
        return rng.standard_normal((n, dim)) / math.sqrt(dim)

    def encode_text(self, text: str, length: int = 512) -> np.ndarray:
        tokens = text.split()[:length]
        rows = [self.embed(f"tok:{tok}")[0] for tok in tokens]
        rows += [self.embed(self.PAD)[0]] * (length - len(tokens))
        return np.stack(rows) if rows else np.zeros((0, self.out_dim))


@dataclass
class ModelInputs:
    f_video: VideoTokenGrid  # clean latents
    f_text: torch.Tensor
    f_ref: torch.Tensor
    streams: list[IdentityStream]

    def unconditional(self) -> "ModelInputs":
        """Text and audio zeroed; face tokens and face masks kept."""
        streams = [s.with_tokens(audio=torch.zeros_like(s.audio.tokens)) for s in self.streams]
        return ModelInputs(self.f_video, torch.zeros_like(self.f_text), self.f_ref, streams)


def encode_inputs(clip: ClipSample, enc: SyntheticEncoder, cfg: ToyDiTConfig, dtype=torch.float32,
                  dilate_px: int | None = None) -> ModelInputs:
    dilate_px = cfg.mask_dilation_px if dilate_px is None else dilate_px
    text = enc.encode_text(clip.text, cfg.text_len)
    ref = enc.embed(f"ref:{clip.clip_id}", cfg.ref_tokens, cfg.d_model)
    if clip.latents is not None:
        latents = np.asarray(clip.latents)
    else:
        rows, cols = clip.frame_dims[0] // cfg.patch[0], clip.frame_dims[1] // cfg.patch[1]
        latents = enc.embed(f"latent:{clip.clip_id}", cfg.latent_frames * rows * cols, cfg.latent_channels)
        latents = latents.reshape(cfg.latent_frames, rows, cols, -1) * math.sqrt(cfg.latent_channels)
    streams = []
    for ident in clip.identities:
        box = global_face_bbox(ident.face_track)
        if dilate_px:
            box = dilate_bbox(box, dilate_px)
        face = enc.embed(f"face:{ident.identity_id}", cfg.face_tokens, cfg.d_af)
        streams.append(IdentityStream.build(ident.identity_id, torch.as_tensor(ident.audio, dtype=dtype),
                                            torch.as_tensor(face, dtype=dtype), box))
    return ModelInputs(VideoTokenGrid(torch.as_tensor(latents, dtype=dtype)), torch.as_tensor(text, dtype=dtype),
                       torch.as_tensor(ref, dtype=dtype), streams)


# ---------------------------------------------------------------------------
# model

class AttentionLayer(nn.Module):
    def __init__(self, d_query: int, d_kv: int, d_model: int, heads: int, dtype):
        super().__init__()
        w = AttentionWeights.init(d_query, d_kv, d_model, heads, dtype=dtype)
        self.heads = heads
        self.w_q, self.w_k = nn.Parameter(w.w_q), nn.Parameter(w.w_k)
        self.w_v, self.w_o = nn.Parameter(w.w_v), nn.Parameter(w.w_o)

    @property
    def weights(self) -> AttentionWeights:
        return AttentionWeights(self.w_q, self.w_k, self.w_v, self.w_o, self.heads)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return attend(x @ self.w_q, context @ self.w_k, context @ self.w_v, self.heads) @ self.w_o


def _ln(x: torch.Tensor) -> torch.Tensor:
    return nn.functional.layer_norm(x, x.shape[-1:])


class DiTBlock(nn.Module):
    def __init__(self, cfg: ToyDiTConfig, dtype):
        super().__init__()
        d = cfg.d_model
        self.self_attn = AttentionLayer(d, d, d, cfg.heads, dtype)
        self.text_attn = AttentionLayer(d, d, d, cfg.heads, dtype)
        self.ref_attn = AttentionLayer(d, d, d, cfg.heads, dtype)
        self.afca = AttentionLayer(d, cfg.d_af, d, cfg.heads, dtype)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_mult * d, dtype=dtype), nn.GELU(),
                                 nn.Linear(cfg.ffn_mult * d, d, dtype=dtype))

    def forward(self, h, grid: GridShape, text, ref, streams: Sequence[IdentityStream], patch=None,
                return_parts: bool = False):
        x = _ln(h)
        h = h + self.self_attn(x, x)
        x = _ln(h)
        parts = identity_contributions(x, grid, streams, self.afca.weights, patch=patch)
        cross = self.text_attn(x, text) + self.ref_attn(x, ref)
        for p in parts:
            cross = cross + p
        h = h + cross
        h = h + self.ffn(_ln(h))
        return (h, parts) if return_parts else h


def sinusoid(positions: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = positions.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(len(positions), 1, dtype=emb.dtype)], dim=-1)
    return emb


def grid_positions(grid: GridShape, dim: int) -> torch.Tensor:
    t, r, c = torch.meshgrid(torch.arange(grid.frames), torch.arange(grid.rows), torch.arange(grid.cols),
                             indexing="ij")
    return (sinusoid(t.reshape(-1), dim, 50.0) + sinusoid(r.reshape(-1), dim, 100.0)
            + sinusoid(c.reshape(-1), dim, 200.0)) / math.sqrt(3)


class ToyDiT(nn.Module):
    """Predicts the noise in a noisy latent grid given text, reference and identity streams."""

    def __init__(self, cfg: ToyDiTConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            d = cfg.d_model
            self.embed = nn.Linear(cfg.latent_channels, d, dtype=dtype)
            self.time_mlp = nn.Sequential(nn.Linear(d, d, dtype=dtype), nn.SiLU(), nn.Linear(d, d, dtype=dtype))
            self.blocks = nn.ModuleList(DiTBlock(cfg, dtype) for _ in range(cfg.depth))
            self.head = nn.Linear(d, cfg.latent_channels, dtype=dtype)

    def embed_tokens(self, x: VideoTokenGrid, t) -> torch.Tensor:
        t = torch.as_tensor([float(t)])
        temb = self.time_mlp(sinusoid(t, self.cfg.d_model).to(self.dtype))
        return self.embed(x.flatten()) + grid_positions(x.shape, self.cfg.d_model).to(self.dtype) + temb

    def forward(self, x: VideoTokenGrid, t, text, ref, streams: Sequence[IdentityStream]) -> torch.Tensor:
        h = self.embed_tokens(x, t)
        for block in self.blocks:
            h = block(h, x.shape, text, ref, streams, patch=self.cfg.patch)
        return self.head(_ln(h))

    def predict(self, inputs: ModelInputs, x: VideoTokenGrid, t) -> torch.Tensor:
        return self(x, t, inputs.f_text, inputs.f_ref, inputs.streams)


def block_forward(h: torch.Tensor, inputs: ModelInputs, model: ToyDiT, block_idx: int,
                  grid: GridShape | None = None) -> torch.Tensor:
    grid = grid or inputs.f_video.shape
    if h.shape != (grid.n_tokens, model.cfg.d_model):
        raise ValueError(f"hidden state {tuple(h.shape)} does not match grid {tuple(grid)} x {model.cfg.d_model}")
    return model.blocks[block_idx](h, grid, inputs.f_text, inputs.f_ref, inputs.streams, patch=model.cfg.patch)


# ---------------------------------------------------------------------------
# diffusion objective

@dataclass
class NoiseSchedule:
    alpha_bar: torch.Tensor  # (steps,) float64

    @classmethod
    def linear(cls, steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
        return cls(torch.cumprod(1 - betas, dim=0))

    @classmethod
    def from_config(cls, cfg: ToyDiTConfig) -> "NoiseSchedule":
        return cls.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)

    def __len__(self) -> int:
        return len(self.alpha_bar)

    def add_noise(self, x0: torch.Tensor, noise: torch.Tensor, t: int) -> torch.Tensor:
        ab = self.alpha_bar[t].to(x0.dtype)
        return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


def denoising_loss(model: ToyDiT, inputs: ModelInputs, schedule: NoiseSchedule, t: int,
                   noise: torch.Tensor) -> torch.Tensor:
    x0 = inputs.f_video
    x_t = VideoTokenGrid(schedule.add_noise(x0.data, noise, t))
    pred = model.predict(inputs, x_t, t)
    return ((pred - noise.reshape(pred.shape)) ** 2).mean()


@dataclass
class TrainState:
    model: ToyDiT
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    step: int = 0
    stage: int = 1


def make_train_state(cfg: ToyDiTConfig, seed: int = 0, dtype=torch.float32) -> TrainState:
    model = ToyDiT(cfg, seed, dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_stage1, weight_decay=cfg.weight_decay)
    return TrainState(model, opt, NoiseSchedule.from_config(cfg))


def set_lr(state: TrainState, lr: float) -> None:
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def draw_timestep_and_noise(schedule: NoiseSchedule, shape, generator: torch.Generator, dtype):
    t = int(torch.randint(0, len(schedule), (1,), generator=generator))
    noise = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
    return t, noise


def training_step(batch: Sequence[ModelInputs], state: TrainState, generator: torch.Generator) -> float:
    """One AdamW update on the mean noise-prediction MSE over ``batch``."""
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    losses, draws = [], []
    for inputs in batch:
        t, noise = draw_timestep_and_noise(state.schedule, inputs.f_video.data.shape, generator,
                                           inputs.f_video.data.dtype)
        draws.append(t)
        losses.append(denoising_loss(state.model, inputs, state.schedule, t, noise))
    loss = torch.stack(losses).mean()
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {state.step}",
                             {"step": state.step, "stage": state.stage, "timesteps": draws,
                              "per_sample_loss": [float(l) for l in losses]})
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


# ---------------------------------------------------------------------------
# two-stage schedule

@dataclass
class StageSpec:
    stage: int
    steps: int
    lr: float
    warmup_steps: int
    data: str  # "mixed": single + concatenated pairs, "multi": authentic multi-person


@dataclass
class StagePlan:
    stages: list[StageSpec]

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def locate(self, step: int) -> tuple[StageSpec, int]:
        for spec in self.stages:
            if step < spec.steps:
                return spec, step
            step -= spec.steps
        raise IndexError("step beyond plan")

    def lr_at(self, step: int) -> float:
        spec, k = self.locate(step)
        if spec.warmup_steps > 0:
            return spec.lr * min(1.0, (k + 1) / spec.warmup_steps)
        return spec.lr


def two_stage_schedule(cfg: ToyDiTConfig, stage2_only: bool = False) -> StagePlan:
    stages = [StageSpec(1, cfg.stage1_steps, cfg.lr_stage1, 0, "mixed"),
              StageSpec(2, cfg.stage2_steps, cfg.lr_stage2, cfg.warmup_steps, "multi")]
    return StagePlan(stages[1:] if stage2_only else stages)


@dataclass
class TrainRecord:
    step: int
    stage: int
    mode: str
    base_lr: float
    lr: float
    loss: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def stage_boundaries(self) -> list[dict]:
        out, prev = [], None
        for r in self.records:
            if r.stage != prev:
                out.append({"stage": r.stage, "first_step": r.step, "base_lr": r.base_lr})
                prev = r.stage
        return out

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])


def smoothed(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    window = max(1, min(window, len(values)))
    return np.convolve(values, np.ones(window) / window, mode="valid")


class _InputCache:
    def __init__(self, enc: SyntheticEncoder, cfg: ToyDiTConfig, dtype):
        self.enc, self.cfg, self.dtype, self._cache = enc, cfg, dtype, {}

    def __call__(self, clip: ClipSample) -> ModelInputs:
        if clip.clip_id not in self._cache:
            self._cache[clip.clip_id] = encode_inputs(clip, self.enc, self.cfg, self.dtype)
        return self._cache[clip.clip_id]


def run_two_stage(cfg: ToyDiTConfig, state: TrainState, stage1_pool: Sequence[ClipSample],
                  stage2_pool: Sequence[ClipSample], rng: np.random.Generator, generator: torch.Generator,
                  *, stage2_only: bool = False, log: TrainLog | None = None,
                  on_step: Callable[[TrainRecord], None] | None = None) -> TrainLog:
    """Run (or resume at ``state.step``) stage 1 on mixed single/paired batches, then stage 2."""
    plan = two_stage_schedule(cfg, stage2_only)
    log = log or TrainLog()
    encode = _InputCache(SyntheticEncoder(cfg.encoder_seed, cfg.d_model), cfg, state.model.dtype)
    for spec in plan.stages:
        pool = stage1_pool if spec.data == "mixed" else stage2_pool
        if spec.steps and not pool:
            raise ScheduleContractError(f"stage {spec.stage} has no training data")
        if spec.data == "multi":
            bad = [c.clip_id for c in pool if len(c.identities) < 2]
            if bad:
                raise ScheduleContractError(f"stage 2 requires multi-person samples; single-person: {bad[:5]}")
    while state.step < plan.total_steps:
        spec, _ = plan.locate(state.step)
        state.stage = spec.stage
        pool = stage1_pool if spec.data == "mixed" else stage2_pool
        idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
        clips = [pool[i] for i in sorted(idx)]
        mode = "multi"
        if spec.data == "mixed":
            draw = select_batch_mode(clips, rng)
            clips, mode = draw.samples, draw.mode
        lr = plan.lr_at(state.step)
        set_lr(state, lr)
        step = state.step
        loss = training_step([encode(c) for c in clips], state, generator)
        record = TrainRecord(step, spec.stage, mode, spec.lr, lr, loss)
        log.records.append(record)
        if on_step is not None:
            on_step(record)
    return log


# ---------------------------------------------------------------------------
# classifier-free guidance sampling

def guided_prediction(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """``uncond + scale * (cond - uncond)``, written so scales 0 and 1 return a branch exactly."""
    return scale * cond + (1 - scale) * uncond


@torch.no_grad()
def cfg_sample(inputs: ModelInputs, model: ToyDiT, cfg_scale: float | None = None, seed: int = 0,
               steps: int | None = None, trace: list | None = None) -> VideoTokenGrid:
    """Deterministic DDIM sampling with classifier-free guidance."""
    model.eval()
    scale = model.cfg.cfg_scale if cfg_scale is None else cfg_scale
    schedule = NoiseSchedule.from_config(model.cfg)
    n = len(schedule)
    timesteps = np.linspace(n - 1, 0, steps or n).round().astype(int)
    timesteps = list(dict.fromkeys(timesteps.tolist()))
    g = torch.Generator().manual_seed(seed)
    shape = inputs.f_video.data.shape
    dtype = inputs.f_video.data.dtype
    x = torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)
    uncond_inputs = inputs.unconditional()
    for i, t in enumerate(timesteps):
        grid = VideoTokenGrid(x)
        cond = model.predict(inputs, grid, t)
        uncond = model.predict(uncond_inputs, grid, t)
        eps = guided_prediction(cond, uncond, scale).reshape(shape)
        if trace is not None:
            trace.append({"t": t, "cond": cond, "uncond": uncond, "eps": eps})
        ab = schedule.alpha_bar[t].to(dtype)
        ab_prev = schedule.alpha_bar[timesteps[i + 1]].to(dtype) if i + 1 < len(timesteps) else torch.ones((), dtype=dtype)
        x0_hat = (x - (1 - ab).sqrt() * eps) / ab.sqrt()
        x = ab_prev.sqrt() * x0_hat + (1 - ab_prev).sqrt() * eps
    return VideoTokenGrid(x)


# ---------------------------------------------------------------------------
# checkpoints

def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for p, st in state.optimizer.state.items():
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                tensors[f"optim.{names[id(p)]}.{key}"] = st[key].detach().cpu().numpy()
    return tensors


def restore_state(state: TrainState, tensors: dict[str, np.ndarray], step: int, stage: int) -> None:
    model_sd = {k[len("model."):]: torch.as_tensor(v, dtype=state.model.dtype)
                for k, v in tensors.items() if k.startswith("model.")}
    state.model.load_state_dict(model_sd)
    for name, p in state.model.named_parameters():
        avg = tensors.get(f"optim.{name}.exp_avg")
        if avg is not None:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.as_tensor(avg, dtype=p.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(tensors[f"optim.{name}.exp_avg_sq"], dtype=p.dtype).clone(),
            }
    state.step, state.stage = step, stage
