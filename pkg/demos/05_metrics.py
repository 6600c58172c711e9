"""
Do listeners move?
==================

Eye-landmark motion averaged over listening intervals, with glitches frozen out.
"""

import numpy as np

from afca_lab.metrics import (LandmarkSequence, SegmentAnnotation, SegmentSyncScores, SpeakerIntervals,
                              anomaly_clamp, frame_displacements, interactivity, motion_score, sync_c_star)

rng = np.random.default_rng(0)
frames, keypoints = 60, 12
eyes = 128 + rng.normal(0, 5, (keypoints, 2))

# Speaker 0 nods gently; speaker 1 is still apart from small jitter and one tracker glitch.
nod = np.stack([np.zeros(frames), 2 * np.sin(np.arange(frames) / 3)], axis=1)
a = LandmarkSequence(eyes[None] + nod[:, None, :])
b_points = eyes[None] + rng.normal(0, 0.1, (frames, keypoints, 2))
b_points[40] += 25.0
b = LandmarkSequence(b_points)

clamped = anomaly_clamp(b)
print("speaker 1 raw motion     ", round(motion_score(b), 3))
print("speaker 1 clamped motion ", round(motion_score(clamped), 3))
print("largest clamped step     ", round(float(frame_displacements(clamped).max()), 3))

ann = SegmentAnnotation([
    SpeakerIntervals(0, speaking=[(0, 30)], listening=[(30, 60)]),
    SpeakerIntervals(1, speaking=[(30, 60)], listening=[(0, 30)]),
])
print("interactivity", round(interactivity(anomaly_clamp(a), clamped, ann), 3))
print("Sync-C*", sync_c_star(SegmentSyncScores(6.0, 8.0), ann))
