"""Multi-identity Audio-Face Cross Attention, its training pipeline and interactivity metrics."""

from .afca import (AfcaWeights, AttentionWeights, AudioShortfallError, AudioTokenStream, FaceTokens, GridShape,
                   IdentityStream, ShapeError, TemporalAttentionMask, VideoTokenGrid, afca_forward,
                   aggregate_identities, audio_face_kv, build_temporal_mask, masked_mhca)
from .masks import FaceTrack, PixelMask, TokenMask, dilate_bbox, global_face_bbox, token_mask_from_bbox
from .metrics import (LandmarkSequence, SegmentAnnotation, SegmentSyncScores, anomaly_clamp, interactivity,
                      motion_score, sync_c_star)

__version__ = "0.1.0"
