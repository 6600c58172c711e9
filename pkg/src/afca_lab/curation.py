"""Metadata-level filters for single- and two-person training clips.

The detector, diarizer, flow and SyncNet outputs are inputs here; every rule is
a pure function of a clip's metadata record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .masks import FaceTrack
from .seeding import rng_for

CHUNK_MEAN_S = 4.0
CHUNK_STD_S = 0.5
CHUNK_BOUNDS_S = (2.5, 5.5)


class CurationValidationError(ValueError):
    """Malformed metadata, as opposed to a clip that fails a rule."""


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    @classmethod
    def accept(cls) -> "Verdict":
        return cls(True)

    @classmethod
    def reject(cls, reason: str) -> "Verdict":
        return cls(False, reason)


@dataclass
class CurationThresholds:
    sync_min_score: float = 0.0
    face_quorum: float = 0.95
    max_mean_flow: float = float("inf")


def check_sync_matrix(m, min_score: float) -> Verdict:
    """Accept iff the diagonal holds the two strictly largest entries and both reach ``min_score``."""
    m = np.asarray(m, dtype=float)
    if m.shape != (2, 2) or not np.isfinite(m).all():
        raise CurationValidationError(f"sync matrix must be a finite 2x2, got {m.tolist()}")
    diag = np.diag(m)
    off = m[[0, 1], [1, 0]]
    if diag.min() <= off.max():
        return Verdict.reject("diagonal-dominance")
    if diag.min() < min_score:
        return Verdict.reject("threshold")
    return Verdict.accept()


def check_sync_score(score: float, min_score: float) -> Verdict:
    return Verdict.accept() if score >= min_score else Verdict.reject("threshold")


@dataclass(frozen=True)
class DiarizationSegment:
    start_s: float
    end_s: float
    active: frozenset


def parse_segments(raw, duration_s: float | None = None) -> list[DiarizationSegment]:
    segs = []
    for item in raw:
        try:
            s, e, active = item
            segs.append(DiarizationSegment(float(s), float(e), frozenset(int(a) for a in active)))
        except (TypeError, ValueError) as exc:
            raise CurationValidationError(f"bad diarization segment {item!r}") from exc
    for seg in segs:
        if seg.end_s <= seg.start_s:
            raise CurationValidationError(f"empty segment {seg}")
        if duration_s is not None and (seg.start_s < 0 or seg.end_s > duration_s + 1e-9):
            raise CurationValidationError(f"segment {seg} outside clip of {duration_s}s")
    for prev, cur in zip(segs, segs[1:]):
        if cur.start_s < prev.end_s:
            raise CurationValidationError(f"segments overlap or are unsorted: {prev} / {cur}")
    return segs


def check_speaker_states(segs: Sequence[DiarizationSegment]) -> Verdict:
    """Each segment must have speaker 0, speaker 1, or both active."""
    parse_segments([(s.start_s, s.end_s, s.active) for s in segs])
    for seg in segs:
        if not seg.active <= {0, 1}:
            return Verdict.reject("unknown-speaker")
        if not seg.active:
            return Verdict.reject("invalid-state")
    return Verdict.accept()


def check_spatial_consistency(track_l: FaceTrack, track_r: FaceTrack) -> Verdict:
    if len(track_l) != len(track_r):
        raise CurationValidationError(f"track lengths differ: {len(track_l)} vs {len(track_r)}")
    bad = np.flatnonzero(track_l.centers_x() >= track_r.centers_x())
    if bad.size:
        return Verdict.reject(f"identity-swap at frame {int(bad[0])}")
    return Verdict.accept()


def check_face_count(face_counts: dict, expected: int, quorum: float) -> Verdict:
    """``face_counts`` maps a detected face count to the number of frames showing it."""
    counts = {int(k): int(v) for k, v in face_counts.items()}
    total = sum(counts.values())
    if total <= 0:
        raise CurationValidationError("face-count histogram is empty")
    if counts.get(expected, 0) / total < quorum:
        return Verdict.reject("below-quorum")
    return Verdict.accept()


def check_motion(mean_flow: float, max_mean_flow: float) -> Verdict:
    return Verdict.accept() if mean_flow <= max_mean_flow else Verdict.reject("excessive-motion")


# ---------------------------------------------------------------------------
# clip-length chunking

def draw_target_lengths(n: int, rng: np.random.Generator, mean: float = CHUNK_MEAN_S, std: float = CHUNK_STD_S,
                        bounds: tuple[float, float] = CHUNK_BOUNDS_S) -> np.ndarray:
    a, b = (bounds[0] - mean) / std, (bounds[1] - mean) / std
    return stats.truncnorm.rvs(a, b, loc=mean, scale=std, size=n, random_state=rng)


@dataclass
class ChunkPlan:
    segments: list[int]
    duration_s: float
    target_s: float

    def to_json(self) -> dict:
        return {"segments": self.segments, "duration_s": self.duration_s, "target_s": self.target_s}


def plan_chunks(durations: Sequence[float], targets: Iterable[float]) -> list[ChunkPlan]:
    """Greedily merge consecutive segments while the running length stays within the target.

    Each chunk takes at least one segment and consumes one target.
    """
    if any(d <= 0 for d in durations):
        raise ValueError("segment durations must be positive")
    targets = iter(targets)
    plans, i = [], 0
    while i < len(durations):
        target = float(next(targets))
        idx, total = [i], float(durations[i])
        i += 1
        while i < len(durations) and total + durations[i] <= target:
            total += durations[i]
            idx.append(i)
            i += 1
        plans.append(ChunkPlan(idx, total, target))
    return plans


def sample_clip_lengths(durations: Sequence[float], rng: np.random.Generator) -> list[ChunkPlan]:
    return plan_chunks(durations, draw_target_lengths(max(len(durations), 1), rng))


# ---------------------------------------------------------------------------
# per-clip pipeline

@dataclass
class AuditRecord:
    clip_id: str
    verdict: str  # accept | reject | validation-error
    failed_rules: list[str] = field(default_factory=list)
    chunk_plan: list[ChunkPlan] = field(default_factory=list)
    error: str | None = None
    duration_s: float = 0.0

    def to_json(self) -> dict:
        out = {"clip_id": self.clip_id, "verdict": self.verdict, "failed_rules": self.failed_rules,
               "chunk_plan": [c.to_json() for c in self.chunk_plan]}
        if self.error is not None:
            out["error"] = self.error
        return out


def curate_clip(record: dict, thresholds: CurationThresholds, seed: int = 0) -> AuditRecord:
    """Run every applicable rule on one metadata record and collect all failures.

    Two-person records carry ``sync_matrix`` and two ``face_tracks``; single-person
    records carry a scalar ``sync_score``.
    """
    clip_id = str(record.get("clip_id", ""))
    try:
        duration = float(record["duration_s"])
        if duration <= 0:
            raise CurationValidationError(f"duration must be positive, got {duration}")
        tracks = [FaceTrack.from_json(t) for t in record.get("face_tracks", [])]
        two_person = "sync_matrix" in record
        expected_faces = 2 if two_person else 1
        segs = parse_segments(record.get("diarization", []), duration)

        verdicts: dict[str, Verdict] = {
            "face-count": check_face_count(record["face_counts"], expected_faces, thresholds.face_quorum),
            "camera-motion": check_motion(float(record["mean_flow"]), thresholds.max_mean_flow),
        }
        if two_person:
            if len(tracks) != 2:
                raise CurationValidationError(f"two-person clip needs 2 face tracks, got {len(tracks)}")
            verdicts["sync"] = check_sync_matrix(record["sync_matrix"], thresholds.sync_min_score)
            verdicts["speaker-states"] = check_speaker_states(segs)
            verdicts["spatial-order"] = check_spatial_consistency(tracks[0], tracks[1])
        else:
            verdicts["sync"] = check_sync_score(float(record["sync_score"]), thresholds.sync_min_score)
            if any(len(s.active) > 1 for s in segs):
                verdicts["speaker-states"] = Verdict.reject("overlapping-speakers")
    except (CurationValidationError, ValueError, KeyError, TypeError) as exc:
        return AuditRecord(clip_id, "validation-error", error=f"{type(exc).__name__}: {exc}")

    failed = [f"{rule}:{v.reason}" for rule, v in verdicts.items() if not v.accepted]
    if failed:
        return AuditRecord(clip_id, "reject", failed, duration_s=duration)
    durations = [s.end_s - s.start_s for s in segs] or [duration]
    plan = sample_clip_lengths(durations, rng_for(seed, "chunk", clip_id))
    return AuditRecord(clip_id, "accept", [], plan, duration_s=duration)


def yield_summary(records: Sequence[AuditRecord]) -> dict:
    total = len(records)
    accepted = [r for r in records if r.verdict == "accept"]
    rule_counts: dict[str, int] = {}
    for r in records:
        for rule in r.failed_rules:
            key = rule.split(":", 1)[0]
            rule_counts[key] = rule_counts.get(key, 0) + 1
    return {
        "total": total,
        "accepted": len(accepted),
        "rejected": sum(r.verdict == "reject" for r in records),
        "validation_errors": sum(r.verdict == "validation-error" for r in records),
        "yield": len(accepted) / total if total else None,
        "accepted_duration_s": sum(r.duration_s for r in accepted),
        "failed_rule_counts": dict(sorted(rule_counts.items())),
    }


def curate_lines(lines: Iterable[str], thresholds: CurationThresholds, seed: int = 0) -> list[AuditRecord]:
    out = []
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise CurationValidationError("record is not a JSON object")
        except (json.JSONDecodeError, CurationValidationError) as exc:
            out.append(AuditRecord(f"<line {n + 1}>", "validation-error", error=str(exc)))
            continue
        out.append(curate_clip(record, thresholds, seed))
    return out
