import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from afca_lab.curation import (CurationThresholds, CurationValidationError, Verdict, check_face_count,
                               check_motion, check_spatial_consistency, check_speaker_states, check_sync_matrix,
                               curate_clip, curate_lines, draw_target_lengths, parse_segments, plan_chunks,
                               sample_clip_lengths, yield_summary)
from afca_lab.masks import FaceTrack

from oracles import sync_matrix_by_sort

FIXTURES = Path(__file__).parent / "fixtures"

EXPECTED_FIXTURE_VERDICTS = [tuple(v) for v in json.loads((FIXTURES / "curation_expected.json").read_text())]


def fixture_thresholds():
    return CurationThresholds(**json.loads((FIXTURES / "curation_config.json").read_text())["thresholds"])


@pytest.mark.parametrize("m, min_score, expected", [
    ([[7, 2], [3, 8]], 5, Verdict.accept()),
    ([[2, 7], [8, 3]], 0, Verdict.reject("diagonal-dominance")),
    ([[7, 2], [3, 4]], 5, Verdict.reject("threshold")),
    ([[5, 5], [1, 6]], 0, Verdict.reject("diagonal-dominance")),
])
def test_sync_matrix_examples(m, min_score, expected):
    assert check_sync_matrix(m, min_score) == expected


def test_sync_matrix_validation():
    with pytest.raises(CurationValidationError):
        check_sync_matrix([[1, 2, 3]], 0)
    with pytest.raises(CurationValidationError):
        check_sync_matrix([[1, float("nan")], [0, 1]], 0)


def test_sync_matrix_matches_sort_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        m = rng.integers(0, 6, (2, 2)).astype(float) if rng.random() < 0.3 else rng.normal(4, 3, (2, 2))
        min_score = float(rng.normal(3, 2))
        assert check_sync_matrix(m, min_score).accepted == sync_matrix_by_sort(m, min_score)


def test_speaker_state_examples():
    assert check_speaker_states(parse_segments([(0, 2, {0}), (2, 5, {0, 1})])).accepted
    assert check_speaker_states(parse_segments([(0, 2, {2})])) == Verdict.reject("unknown-speaker")
    assert check_speaker_states(parse_segments([(0, 2, set())])) == Verdict.reject("invalid-state")
    with pytest.raises(CurationValidationError, match="overlap"):
        parse_segments([(0, 2, {0}), (1, 3, {1})])


def _tracks(xl, xr, w=40):
    left = FaceTrack(tuple((x - w // 2, 10, x + w // 2, 60) for x in xl), "L", (480, 832))
    right = FaceTrack(tuple((x - w // 2, 10, x + w // 2, 60) for x in xr), "R", (480, 832))
    return left, right


def test_spatial_constant_order():
    assert check_spatial_consistency(*_tracks([100] * 12, [500] * 12)).accepted


def test_spatial_swap_frame_seven():
    xl, xr = [100] * 12, [500] * 12
    for j in range(7, 12):
        xl[j], xr[j] = 500, 100
    assert check_spatial_consistency(*_tracks(xl, xr)) == Verdict.reject("identity-swap at frame 7")


def test_spatial_equal_centers_reject():
    xl, xr = [100] * 5, [500] * 5
    xl[3] = xr[3] = 300
    assert not check_spatial_consistency(*_tracks(xl, xr)).accepted


def test_spatial_length_mismatch():
    with pytest.raises(CurationValidationError):
        check_spatial_consistency(*_tracks([100] * 3, [500] * 4))


@given(st.lists(st.tuples(st.integers(30, 380), st.integers(30, 380)), min_size=1, max_size=10),
       st.integers(-25, 25))
def test_spatial_translation_invariance(pairs, dx):
    xl, xr = [p[0] for p in pairs], [p[1] for p in pairs]
    before = check_spatial_consistency(*_tracks(xl, xr)).accepted
    after = check_spatial_consistency(*_tracks([x + 400 + dx for x in xl], [x + 400 + dx for x in xr])).accepted
    assert before == after


def test_face_quorum():
    assert check_face_count({2: 95, 1: 5}, 2, 0.95).accepted
    assert check_face_count({"2": 94, "3": 6}, 2, 0.95) == Verdict.reject("below-quorum")
    with pytest.raises(CurationValidationError):
        check_face_count({}, 2, 0.95)


def test_motion_threshold():
    assert check_motion(5.0, 5.0).accepted
    assert not check_motion(5.01, 5.0).accepted


def test_truncated_normal_statistics():
    draws = draw_target_lengths(10_000, np.random.default_rng(0))
    assert 3.95 <= draws.mean() <= 4.05
    assert 0.43 <= draws.std() <= 0.57
    assert draws.min() >= 2.5 and draws.max() <= 5.5


def test_single_segment_single_chunk():
    plans = sample_clip_lengths([3.0], np.random.default_rng(1))
    assert [(p.segments, p.duration_s) for p in plans] == [([0], 3.0)]


def test_greedy_chunks():
    plans = plan_chunks([2, 2, 2], [4.1, 4.1])
    assert [p.duration_s for p in plans] == [4, 2]


def test_overlong_segment_stands_alone():
    plans = plan_chunks([7.0, 1.0], [4.0, 4.0])
    assert [p.segments for p in plans] == [[0], [1]]


@given(st.lists(st.floats(0.1, 6.0), min_size=1, max_size=20), st.integers(0, 2**31))
def test_chunks_cover_segments_in_order(durations, seed):
    plans = sample_clip_lengths(durations, np.random.default_rng(seed))
    assert [i for p in plans for i in p.segments] == list(range(len(durations)))
    for p in plans:
        assert len(p.segments) == 1 or p.duration_s <= p.target_s


def test_fixture_verdicts():
    recs = curate_lines((FIXTURES / "curation_corpus.ndjson").read_text().splitlines(), fixture_thresholds())
    assert [(r.clip_id, r.verdict, r.failed_rules) for r in recs] == EXPECTED_FIXTURE_VERDICTS
    assert all(r.chunk_plan for r in recs if r.verdict == "accept")
    summ = yield_summary(recs)
    assert (summ["total"], summ["accepted"], summ["rejected"], summ["validation_errors"]) == (10, 2, 6, 2)
    assert summ["yield"] == pytest.approx(0.2)


def test_every_failing_rule_is_named():
    rec = json.loads((FIXTURES / "curation_corpus.ndjson").read_text().splitlines()[0])
    rec["mean_flow"] = 99.0
    rec["sync_matrix"] = [[1, 9], [9, 1]]
    audit = curate_clip(rec, fixture_thresholds())
    assert audit.failed_rules == ["camera-motion:excessive-motion", "sync:diagonal-dominance"]


def test_filters_order_independent():
    lines = (FIXTURES / "curation_corpus.ndjson").read_text().splitlines()
    fwd = {r.clip_id: r.to_json() for r in curate_lines(lines[:9], fixture_thresholds(), seed=3)}
    rev = {r.clip_id: r.to_json() for r in curate_lines(lines[:9][::-1], fixture_thresholds(), seed=3)}
    assert fwd == rev
