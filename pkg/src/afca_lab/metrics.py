"""Eye-landmark Motion, listening-phase Interactivity and speaking-phase Sync-C*.

Intervals are half-open ``[start, end)`` in frame indices and are weighted by
their length in frames.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

CANVAS = (256, 256)
JUMP_PX = 10.0
# Eye region of the common 68-point layout (both eyes, 6 points each).
EYE_INDICES_68 = tuple(range(36, 48))


@dataclass
class LandmarkSequence:
    points: np.ndarray  # (frames, keypoints, 2)
    fps: float = 24.0
    canvas: tuple[int, int] = CANVAS

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 3 or self.points.shape[2] != 2:
            raise ValueError(f"landmarks must be (frames, keypoints, 2), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("landmarks contain non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, eye_indices: Sequence[int] | None) -> "LandmarkSequence":
        if eye_indices is None:
            return self
        return LandmarkSequence(self.points[:, list(eye_indices)], self.fps, self.canvas)

    def window(self, start: int, end: int) -> "LandmarkSequence":
        return LandmarkSequence(self.points[start:end], self.fps, self.canvas)


@dataclass
class SpeakerIntervals:
    id: int
    speaking: list[tuple[int, int]] = field(default_factory=list)
    listening: list[tuple[int, int]] = field(default_factory=list)
    sync_c: float | None = None

    def __post_init__(self):
        self.speaking = [_interval(iv) for iv in self.speaking]
        self.listening = [_interval(iv) for iv in self.listening]
        for ls, le in self.listening:
            for ss, se in self.speaking:
                if ls < se and ss < le:
                    raise ValueError(f"speaker {self.id}: listening [{ls},{le}) overlaps speaking [{ss},{se})")


def _interval(iv) -> tuple[int, int]:
    s, e = int(iv[0]), int(iv[1])
    if s < 0 or e < s:
        raise ValueError(f"bad interval {iv}")
    return s, e


def _total(intervals) -> int:
    return sum(e - s for s, e in intervals)


@dataclass
class SegmentAnnotation:
    """Speaking/listening intervals of a two-person clip.

    ``L1``/``L2`` are the first speaker's speaking/listening lengths and
    ``L3``/``L4`` the second speaker's listening/speaking lengths.
    """

    speakers: list[SpeakerIntervals]

    @property
    def L1(self) -> int:
        return _total(self.speakers[0].speaking)

    @property
    def L2(self) -> int:
        return _total(self.speakers[0].listening)

    @property
    def L3(self) -> int:
        return _total(self.speakers[1].listening) if len(self.speakers) > 1 else 0

    @property
    def L4(self) -> int:
        return _total(self.speakers[1].speaking) if len(self.speakers) > 1 else 0

    @classmethod
    def from_json(cls, obj: dict) -> "SegmentAnnotation":
        speakers = [
            SpeakerIntervals(int(s["id"]), s.get("speaking", []), s.get("listening", []), s.get("sync_c"))
            for s in obj["speakers"]
        ]
        if not speakers:
            raise ValueError("annotation lists no speakers")
        return cls(sorted(speakers, key=lambda s: s.id))


@dataclass
class SegmentSyncScores:
    sync_l1: float
    sync_l4: float


def anomaly_clamp(seq: LandmarkSequence, jump_px: float = JUMP_PX) -> LandmarkSequence:
    """Freeze landmarks across implausible jumps.

    A frame whose mean keypoint displacement from the last accepted frame
    exceeds ``jump_px`` is replaced by that accepted frame; the freeze lifts at
    the first raw frame within ``jump_px`` of the frozen value.
    """
    raw = seq.points
    out = raw.copy()
    for j in range(1, len(raw)):
        disp = np.linalg.norm(raw[j] - out[j - 1], axis=-1).mean()
        if disp > jump_px:
            out[j] = out[j - 1]
    return LandmarkSequence(out, seq.fps, seq.canvas)


def frame_displacements(seq: LandmarkSequence) -> np.ndarray:
    """Mean Euclidean keypoint displacement for each consecutive frame pair."""
    return np.linalg.norm(np.diff(seq.points, axis=0), axis=-1).mean(axis=1)


def motion_score(seq: LandmarkSequence) -> float:
    if len(seq) < 2:
        raise ValueError(f"motion needs at least 2 frames, got {len(seq)}")
    return float(frame_displacements(seq).mean())


def interval_weighted_mean(values: Sequence[float], lengths: Sequence[float]) -> float:
    lengths = np.asarray(lengths, dtype=float)
    total = lengths.sum()
    if total <= 0:
        raise ValueError("interval lengths sum to zero; metric undefined")
    return float(np.dot(np.asarray(values, dtype=float), lengths) / total)


def interactivity(seq_a: LandmarkSequence, seq_b: LandmarkSequence, ann: SegmentAnnotation) -> float:
    """Length-weighted Motion of each speaker over their listening intervals.

    Intervals shorter than two frames carry no motion and are skipped.
    """
    values, lengths = [], []
    for speaker, seq in zip(ann.speakers[:2], (seq_a, seq_b)):
        for s, e in speaker.listening:
            if e - s < 2:
                continue
            if e > len(seq):
                raise ValueError(f"listening interval [{s},{e}) exceeds {len(seq)} frames of speaker {speaker.id}")
            values.append(motion_score(seq.window(s, e)))
            lengths.append(e - s)
    if not lengths:
        raise ValueError("no listening intervals of two or more frames; interactivity undefined")
    return interval_weighted_mean(values, lengths)


def sync_c_star(scores: SegmentSyncScores, ann: SegmentAnnotation) -> float:
    if ann.L1 + ann.L4 <= 0:
        raise ValueError("no speaking intervals; Sync-C* undefined")
    return interval_weighted_mean([scores.sync_l1, scores.sync_l4], [ann.L1, ann.L4])


# ---------------------------------------------------------------------------
# corpus evaluation

def load_landmarks(path) -> LandmarkSequence:
    obj = json.loads(Path(path).read_text())
    return LandmarkSequence(np.asarray(obj["frames"], dtype=float), float(obj.get("fps", 24.0)),
                            tuple(obj.get("canvas", CANVAS)))


def load_annotation(path) -> SegmentAnnotation:
    return SegmentAnnotation.from_json(json.loads(Path(path).read_text()))


def _eye_subset(seq: LandmarkSequence, eye_indices) -> LandmarkSequence:
    if eye_indices is None and seq.points.shape[1] == 68:
        eye_indices = EYE_INDICES_68
    return seq.select(eye_indices)


@dataclass
class ClipResult:
    clip_id: str
    interactivity: float
    sync_c_star: float | None
    motion_curves: dict[int, list[float]]


def evaluate_clip(annotation_path, landmark_paths: dict[int, Path], *, jump_px: float = JUMP_PX,
                  eye_indices=None, clip_id: str = "") -> ClipResult:
    ann = load_annotation(annotation_path)
    if len(ann.speakers) != 2:
        raise ValueError(f"expected two speakers, got {len(ann.speakers)}")
    seqs = []
    for spk in ann.speakers:
        seq = _eye_subset(load_landmarks(landmark_paths[spk.id]), eye_indices)
        seqs.append(anomaly_clamp(seq, jump_px))
    inter = interactivity(seqs[0], seqs[1], ann)
    sync = None
    if all(s.sync_c is not None for s in ann.speakers):
        sync = sync_c_star(SegmentSyncScores(ann.speakers[0].sync_c, ann.speakers[1].sync_c), ann)
    curves = {spk.id: frame_displacements(seq).tolist() for spk, seq in zip(ann.speakers, seqs)}
    return ClipResult(clip_id, inter, sync, curves)


@dataclass
class CorpusReport:
    clips: list[ClipResult]
    skipped: list[dict]

    def summary(self) -> dict:
        inter = [c.interactivity for c in self.clips]
        sync = [c.sync_c_star for c in self.clips if c.sync_c_star is not None]
        return {
            "n_clips": len(self.clips),
            "n_skipped": len(self.skipped),
            "mean_interactivity": float(np.mean(inter)) if inter else None,
            "mean_sync_c_star": float(np.mean(sync)) if sync else None,
        }

    def to_json(self) -> dict:
        return {
            "clips": [{"clip_id": c.clip_id, "interactivity": c.interactivity, "sync_c_star": c.sync_c_star}
                      for c in self.clips],
            "skipped": self.skipped,
            "summary": self.summary(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["clip_id", "interactivity", "sync_c_star"])
        for c in self.clips:
            w.writerow([c.clip_id, repr(c.interactivity), "" if c.sync_c_star is None else repr(c.sync_c_star)])
        return buf.getvalue()

    def motion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["clip_id", "speaker", "transition", "displacement_px"])
        for c in self.clips:
            for spk, curve in sorted(c.motion_curves.items()):
                for j, d in enumerate(curve):
                    w.writerow([c.clip_id, spk, j, repr(d)])
        return buf.getvalue()


def corpus_report(corpus_dir, *, jump_px: float = JUMP_PX, eye_indices=None) -> CorpusReport:
    """Evaluate every ``<clip>.annotation.json`` with its ``<clip>.landmarks.<speaker>.json`` files."""
    corpus_dir = Path(corpus_dir)
    clips, skipped = [], []
    ann_files = {p.name[: -len(".annotation.json")]: p for p in corpus_dir.glob("*.annotation.json")}
    lm_clips = {p.name.split(".landmarks.")[0] for p in corpus_dir.glob("*.landmarks.*.json")}
    for clip_id in sorted(lm_clips - set(ann_files)):
        skipped.append({"clip_id": clip_id, "reason": "missing annotation"})
    for clip_id in sorted(ann_files):
        try:
            ann = load_annotation(ann_files[clip_id])
            paths = {s.id: corpus_dir / f"{clip_id}.landmarks.{s.id}.json" for s in ann.speakers}
            missing = [str(p.name) for p in paths.values() if not p.exists()]
            if missing:
                skipped.append({"clip_id": clip_id, "reason": f"missing landmarks: {', '.join(missing)}"})
                continue
            clips.append(evaluate_clip(ann_files[clip_id], paths, jump_px=jump_px, eye_indices=eye_indices,
                                       clip_id=clip_id))
        except (ValueError, KeyError, TypeError) as exc:
            logger.warning("skipping %s: %s", clip_id, exc)
            skipped.append({"clip_id": clip_id, "reason": f"{type(exc).__name__}: {exc}"})
    skipped.sort(key=lambda s: s["clip_id"])
    return CorpusReport(clips, skipped)
