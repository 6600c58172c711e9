"""``afca-lab`` command line entry point.

Exit codes: 0 pass, 1 partial rejects, 2 IO/format error, 3 invariance failure,
4 numerical failure, 5 schedule contract violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .afca import (GridShape, IdentityStream, VideoTokenGrid, aggregate_identities, identity_contributions,
                   stream_token_mask)
from .augmentation import load_manifest
from .curation import CurationThresholds, curate_lines, yield_summary
from .masks import PixelMask
from .metrics import JUMP_PX, corpus_report
from .seeding import derive_seed, rng_for, torch_generator
from .synthetic import single_person_clips, two_person_clips
from .toy_dit import (NumericalError, ScheduleContractError, SyntheticEncoder, ToyDiT, ToyDiTConfig, TrainLog,
                      _ln, make_train_state, restore_state, run_two_stage, smoothed, state_tensors)
from .weights_io import ChecksumError, load_weights, save_weights

logger = logging.getLogger("afca_lab")

EXIT_OK, EXIT_REJECTS, EXIT_IO, EXIT_INVARIANCE, EXIT_NUMERICAL, EXIT_CONTRACT = 0, 1, 2, 3, 4, 5

CONFIG_SCHEMA = {
    "seed": None,
    "paths": {"input", "corpus", "weights", "resume", "manifest", "stage2_manifest"},
    "model": None,
    "thresholds": {"sync_min_score", "jump_px", "face_quorum", "max_mean_flow"},
    "demo": {"n_identities"},
    "train": {"n_single", "n_multi", "stage2_only", "smoothing"},
    "eval": {"eye_indices", "plot"},
}

DEFAULTS = {
    "seed": 0,
    "paths": {},
    "model": {},
    "thresholds": {"sync_min_score": 0.0, "jump_px": JUMP_PX, "face_quorum": 0.95, "max_mean_flow": None},
    "demo": {"n_identities": 2},
    "train": {"n_single": 8, "n_multi": 4, "stage2_only": False, "smoothing": 20},
    "eval": {"eye_indices": None, "plot": False},
}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    seed: int
    paths: dict
    model: ToyDiTConfig
    thresholds: dict
    demo: dict
    train: dict
    eval: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = sorted(set(raw) - set(CONFIG_SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        merged = {}
        for key, default in DEFAULTS.items():
            value = raw.get(key, default)
            allowed = CONFIG_SCHEMA[key]
            if isinstance(default, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                if allowed is not None:
                    bad = sorted(set(value) - allowed)
                    if bad:
                        raise ConfigError(f"unknown keys in {key!r}: {bad}")
                value = {**default, **value}
            merged[key] = value
        try:
            merged["model"] = ToyDiTConfig.from_dict(merged["model"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        merged["seed"] = int(merged["seed"])
        return cls(**merged)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_meta(out: Path, command: str, argv: list[str]) -> None:
    meta = {"command": command, "argv": argv, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "version": __version__, "python": platform.python_version(), "torch": torch.__version__}
    (out / "run_meta.json").write_text(_dump(meta))


# ---------------------------------------------------------------------------
# demo-forward

def _demo_streams(cfg: ToyDiTConfig, n: int, seed: int, dtype) -> tuple[GridShape, list[IdentityStream]]:
    band_px = 4 * cfg.patch[1]
    grid = GridShape(cfg.latent_frames, 4, 4 * max(n, 1))
    dims = (4 * cfg.patch[0], grid.cols * cfg.patch[1])
    enc = SyntheticEncoder(cfg.encoder_seed, cfg.d_af)
    rng = rng_for(seed, "demo-streams")
    streams = []
    for k in range(n):
        x0 = k * band_px + int(rng.integers(0, band_px // 4))
        x1 = (k + 1) * band_px - int(rng.integers(0, band_px // 4))
        y0 = int(rng.integers(0, dims[0] // 4))
        y1 = dims[0] - int(rng.integers(0, dims[0] // 4))
        audio = torch.as_tensor(rng.standard_normal((cfg.n_audio_frames, cfg.d_af)), dtype=dtype)
        face = torch.as_tensor(enc.embed(f"face:id{k}", cfg.face_tokens), dtype=dtype)
        streams.append(IdentityStream.build(f"id{k}", audio, face, PixelMask((x0, y0, x1, y1), dims)))
    return grid, streams


def _load_model_weights(model: ToyDiT, path) -> None:
    tensors, _ = load_weights(path)
    sd = {k[len("model."):]: torch.as_tensor(v, dtype=model.dtype) for k, v in tensors.items()
          if k.startswith("model.")}
    model.load_state_dict(sd)


def cmd_demo_forward(cfg: RunConfig, out: Path) -> int:
    mcfg, dtype = cfg.model, torch.float64
    n = int(cfg.demo["n_identities"])
    model = ToyDiT(mcfg, derive_seed(cfg.seed, "demo-model"), dtype)
    if cfg.paths.get("weights"):
        _load_model_weights(model, cfg.paths["weights"])
    grid, streams = _demo_streams(mcfg, n, cfg.seed, dtype)
    enc = SyntheticEncoder(mcfg.encoder_seed, mcfg.d_model)
    text = torch.as_tensor(enc.encode_text("two people are talking", mcfg.text_len), dtype=dtype)
    ref = torch.as_tensor(enc.embed("ref:demo", mcfg.ref_tokens), dtype=dtype)
    g = torch_generator(cfg.seed, "demo-latent")
    x = torch.randn(*grid, mcfg.latent_channels, generator=g, dtype=dtype)

    blocks = []
    with torch.no_grad():
        h = model.embed_tokens(VideoTokenGrid(x), 10)
        h_first = _ln(h)
        for i, block in enumerate(model.blocks):
            h, parts = block(h, grid, text, ref, streams, patch=mcfg.patch, return_parts=True)
            blocks.append({"block": i, "identity_norms": {s.identity_id: float(p.norm())
                                                          for s, p in zip(streams, parts)}})

        weights = model.blocks[0].afca.weights
        checks = {}
        base = aggregate_identities(h_first, grid, streams, weights, patch=mcfg.patch)
        perm = aggregate_identities(h_first, grid, streams[::-1], weights, patch=mcfg.patch)
        diff = float((base - perm).abs().max())
        checks["permutation"] = {"pass": diff <= 1e-6, "max_abs_diff": diff}

        ghost = IdentityStream.build("ghost", torch.ones(mcfg.n_audio_frames, mcfg.d_af, dtype=dtype),
                                     torch.ones(mcfg.face_tokens, mcfg.d_af, dtype=dtype))
        masks = [stream_token_mask(s, grid, mcfg.patch) for s in streams]
        with_ghost = aggregate_identities(h_first, grid, list(streams) + [ghost], weights,
                                          token_masks=masks + [np.zeros(grid.n_tokens)])
        without = aggregate_identities(h_first, grid, streams, weights, token_masks=masks)
        diff = float((with_ghost - without).abs().max())
        checks["nullification"] = {"pass": diff == 0.0, "max_abs_diff": diff}

        empty = aggregate_identities(h_first, grid, [], weights)
        checks["empty_identity_set"] = {"pass": bool(torch.equal(empty, h_first))}

        if n >= 2:
            parts = identity_contributions(h_first, grid, streams, weights, token_masks=masks)
            bumped = [streams[0]] + [s.with_tokens(audio=s.audio.tokens + 1.0) for s in streams[1:]]
            parts_b = identity_contributions(h_first, grid, bumped, weights, token_masks=masks)
            rows = masks[0] > 0
            total = sum(parts)
            total_b = sum(parts_b)
            diff = float((total - total_b)[torch.as_tensor(rows)].abs().max())
            checks["disjoint_locality"] = {"pass": diff == 0.0, "max_abs_diff": diff}

    trace = {"config": cfg.to_dict(), "n_identities": n, "grid": list(grid), "blocks": blocks, "checks": checks,
             "h_out_equals_h_in": checks["empty_identity_set"]["pass"] if n == 0 else None}
    (out / "trace.json").write_text(_dump(trace))
    failed = [name for name, c in checks.items() if not c["pass"]]
    if failed:
        logger.error("invariance checks failed: %s", ", ".join(failed))
        return EXIT_INVARIANCE
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-toy

def _loss_csv(log: TrainLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "stage", "mode", "base_lr", "lr", "loss"])
    for r in log.records:
        w.writerow([r.step, r.stage, r.mode, repr(r.base_lr), repr(r.lr), repr(r.loss)])
    return buf.getvalue()


def cmd_train_toy(cfg: RunConfig, out: Path) -> int:
    mcfg = cfg.model
    paths = cfg.paths
    try:
        stage1 = load_manifest(paths["manifest"]) if paths.get("manifest") else \
            single_person_clips(int(cfg.train["n_single"]), mcfg, derive_seed(cfg.seed, "data-single"))
        stage2 = load_manifest(paths["stage2_manifest"]) if paths.get("stage2_manifest") else \
            two_person_clips(int(cfg.train["n_multi"]), mcfg, derive_seed(cfg.seed, "data-multi"))
    except (OSError, ValueError, KeyError) as exc:
        logger.error("cannot load training data: %s", exc)
        return EXIT_IO

    state = make_train_state(mcfg, derive_seed(cfg.seed, "model"))
    log = TrainLog()
    if paths.get("resume"):
        try:
            tensors, meta = load_weights(paths["resume"])
        except (OSError, ChecksumError, ValueError, KeyError) as exc:
            logger.error("cannot resume: %s", exc)
            return EXIT_IO
        restore_state(state, tensors, int(meta["step"]), int(meta["stage"]))
    start = state.step
    rng = rng_for(cfg.seed, "batches", start)
    gen = torch_generator(cfg.seed, "noise", start)
    try:
        run_two_stage(mcfg, state, stage1, stage2, rng, gen, stage2_only=bool(cfg.train["stage2_only"]), log=log)
    except ScheduleContractError as exc:
        logger.error("schedule contract violated: %s", exc)
        (out / "error.json").write_text(_dump({"error": "contract", "message": str(exc)}))
        return EXIT_CONTRACT
    except NumericalError as exc:
        logger.error("%s", exc)
        (out / "diagnostics.json").write_text(_dump({"error": str(exc), **exc.diagnostics}))
        return EXIT_NUMERICAL

    losses = log.losses()
    window = int(cfg.train["smoothing"])
    sm = smoothed(losses, window) if len(losses) else np.array([])
    summary = {
        "config": cfg.to_dict(),
        "start_step": start,
        "end_step": state.step,
        "stage_boundaries": log.stage_boundaries(),
        "smoothed_initial_loss": float(sm[0]) if sm.size else None,
        "smoothed_final_loss": float(sm[-1]) if sm.size else None,
    }
    summary["loss_decreased"] = bool(sm.size and sm[-1] < sm[0])
    (out / "loss_curve.csv").write_text(_loss_csv(log))
    (out / "train_summary.json").write_text(_dump(summary))
    save_weights(out / "checkpoint", state_tensors(state),
                 {"step": state.step, "stage": state.stage, "config": cfg.to_dict()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# curate / eval

def _thresholds(cfg: RunConfig) -> CurationThresholds:
    t = cfg.thresholds
    max_flow = t.get("max_mean_flow")
    return CurationThresholds(float(t["sync_min_score"]), float(t["face_quorum"]),
                              float("inf") if max_flow is None else float(max_flow))


def cmd_curate(cfg: RunConfig, out: Path, input_path: str | None) -> int:
    src = input_path or cfg.paths.get("input")
    if not src:
        logger.error("curate needs an input NDJSON file")
        return EXIT_IO
    try:
        lines = Path(src).read_text().splitlines()
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_IO
    records = curate_lines(lines, _thresholds(cfg), cfg.seed)
    (out / "audit.ndjson").write_text("".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records))
    summary = {"config": cfg.to_dict(), **yield_summary(records)}
    (out / "summary.json").write_text(_dump(summary))
    return EXIT_OK if all(r.verdict == "accept" for r in records) else EXIT_REJECTS


def cmd_eval(cfg: RunConfig, out: Path, corpus: str | None, plot: bool) -> int:
    src = corpus or cfg.paths.get("corpus")
    if not src or not Path(src).is_dir():
        logger.error("eval needs an existing corpus directory, got %r", src)
        return EXIT_IO
    eye = cfg.eval.get("eye_indices")
    report = corpus_report(src, jump_px=float(cfg.thresholds["jump_px"]), eye_indices=eye)
    payload = {"config": cfg.to_dict(), **report.to_json()}
    (out / "report.json").write_text(_dump(payload))
    (out / "report.csv").write_text(report.to_csv())
    if plot or cfg.eval.get("plot"):
        (out / "motion.csv").write_text(report.motion_csv())
    return EXIT_IO if report.skipped else EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afca-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("demo-forward", "train-toy", "curate", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", type=Path, default=Path("afca_lab_out"), help="output directory")
        if name == "curate":
            p.add_argument("input", nargs="?", help="NDJSON clip metadata")
        if name == "eval":
            p.add_argument("corpus", nargs="?", help="directory of landmark/annotation files")
            p.add_argument("--plot", action="store_true", help="also write per-clip motion-over-time CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("AFCA_LAB_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        raw = json.loads(args.config.read_text()) if args.config else {}
        if args.seed is not None:
            raw["seed"] = args.seed
        cfg = RunConfig.from_dict(raw)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        logger.error("bad config: %s", exc)
        return EXIT_IO
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_meta(out, args.command, argv)
    try:
        if args.command == "demo-forward":
            return cmd_demo_forward(cfg, out)
        if args.command == "train-toy":
            return cmd_train_toy(cfg, out)
        if args.command == "curate":
            return cmd_curate(cfg, out, args.input)
        return cmd_eval(cfg, out, args.corpus, args.plot)
    except (ChecksumError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
