"""Independent reference implementations used only by the tests.

Nothing here imports the code paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def temporal_mask_by_cases(n_frames: int, n_audio: int, n_face: int) -> np.ndarray:
    out = np.zeros((n_frames, n_audio + n_face), dtype=bool)
    for t in range(n_frames):
        for col in range(n_audio + n_face):
            if col >= n_audio:
                out[t, col] = True
            elif t == 0:
                out[t, col] = True
            else:
                out[t, col] = 4 * (t - 1) <= col < 4 * t
    return out


def dense_attention_loops(x_q, keys_in, w_q, w_k, w_v, w_o, heads, allow):
    """Masked multi-head attention written as explicit loops over heads, queries and keys.

    ``allow[i][j]`` says whether query ``i`` may see key ``j``. Disallowed keys are skipped.
    """
    x_q = np.asarray(x_q, float)
    keys_in = np.asarray(keys_in, float)
    q = x_q @ w_q
    k = keys_in @ w_k
    v = keys_in @ w_v
    d_k = q.shape[1] // heads
    d_v = v.shape[1] // heads
    n_q, n_k = q.shape[0], k.shape[0]
    concat = np.zeros((n_q, heads * d_v))
    for h in range(heads):
        for i in range(n_q):
            logits = []
            for j in range(n_k):
                if allow[i][j]:
                    s = sum(q[i, h * d_k + c] * k[j, h * d_k + c] for c in range(d_k)) / math.sqrt(d_k)
                    logits.append((j, s))
            top = max(s for _, s in logits)
            z = sum(math.exp(s - top) for _, s in logits)
            for j, s in logits:
                concat[i, h * d_v:(h + 1) * d_v] += math.exp(s - top) / z * v[j, h * d_v:(h + 1) * d_v]
    return concat @ w_o


def rasterize_token_mask(bbox, frame_dims, patch, n_frames):
    """Paint the box pixel by pixel, then OR-reduce each (zero-padded) patch."""
    h_px, w_px = frame_dims
    p_h, p_w = patch
    rows, cols = -(-h_px // p_h), -(-w_px // p_w)
    canvas = np.zeros((rows * p_h, cols * p_w), dtype=bool)
    x0, y0, x1, y1 = bbox
    for y in range(y0, y1):
        for x in range(x0, x1):
            canvas[y, x] = True
    per_frame = canvas.reshape(rows, p_h, cols, p_w).any(axis=(1, 3)).astype(float)
    return np.concatenate([per_frame.reshape(-1)] * n_frames)


def sync_matrix_by_sort(m, min_score) -> bool:
    entries = sorted(((m[i][j], (i, j)) for i in range(2) for j in range(2)), key=lambda e: -e[0])
    top_two = {entries[0][1], entries[1][1]}
    strict = entries[1][0] > entries[2][0]
    return top_two == {(0, 0), (1, 1)} and strict and min(m[0][0], m[1][1]) >= min_score


def central_differences(f, params, step=1e-4, coords=None):
    """Gradient of scalar ``f()`` w.r.t. float64 torch tensors, perturbing entries in place.

    ``coords`` optionally restricts to a list of ``(param_index, flat_index)`` pairs.
    """
    import torch

    if coords is None:
        coords = [(p, i) for p, t in enumerate(params) for i in range(t.numel())]
    out = []
    with torch.no_grad():
        for p, i in coords:
            flat = params[p].view(-1)
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(f())
            flat[i] = orig - step
            f_minus = float(f())
            flat[i] = orig
            out.append((f_plus - f_minus) / (2 * step))
    return np.array(out)


def relative_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def reference_ddim(eps_fn, shape, cfg, seed):
    """Full-length deterministic DDIM in float64 driven by a single noise predictor."""
    import torch

    from afca_lab.afca import VideoTokenGrid
    from afca_lab.toy_dit import NoiseSchedule

    alpha_bar = NoiseSchedule.from_config(cfg).alpha_bar
    ts = list(range(len(alpha_bar) - 1, -1, -1))
    x = torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    for i, t in enumerate(ts):
        eps = eps_fn(VideoTokenGrid(x), t).reshape(shape)
        ab = alpha_bar[t]
        ab_prev = alpha_bar[ts[i + 1]] if i + 1 < len(ts) else torch.ones((), dtype=torch.float64)
        x0 = (x - (1 - ab).sqrt() * eps) / ab.sqrt()
        x = ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps
    return x
