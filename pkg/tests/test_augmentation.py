import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from afca_lab.augmentation import (CROP_H, CROP_W, ClipIdentity, ClipSample, CropWindow, crop_clip,
                                   dual_speaker_prompts, face_centered_min_crop, hconcat_pair, load_manifest,
                                   random_enlarge, select_batch_mode)
from afca_lab.masks import FaceTrack, global_face_bbox
from afca_lab.synthetic import raw_single_clip


def aspect_ok(w: CropWindow) -> bool:
    return abs(w.height * CROP_W - w.width * CROP_H) <= max(CROP_H, CROP_W)  # ±1 px in either side


def cropped(clip_id, box, n_frames=9, n_audio=33, fps=24.0, seed=0):
    rng = np.random.default_rng(seed)
    track = FaceTrack((tuple(box),) * n_frames, clip_id, (CROP_H, CROP_W))
    return ClipSample(clip_id, (CROP_H, CROP_W), n_frames, fps, f"text of {clip_id}",
                      [ClipIdentity(clip_id, rng.standard_normal((n_audio, 8)), track)])


# --- crops

def test_min_crop_centered():
    w = face_centered_min_crop((1080, 1920), (800, 500))
    assert (w.y0, w.y1, w.x0, w.x1) == (260, 740, 592, 1008)


def test_min_crop_corner():
    w = face_centered_min_crop((1080, 1920), (100, 100))
    assert (w.y0, w.y1, w.x0, w.x1) == (0, 480, 0, 416)


@pytest.mark.parametrize("center", [(0, 0), (200, 240), (415, 479)])
def test_min_crop_exact_fit(center):
    assert face_centered_min_crop((480, 416), center) == CropWindow(0, 0, 416, 480)


def test_min_crop_too_small():
    with pytest.raises(ValueError, match="smaller"):
        face_centered_min_crop((479, 1000), (10, 10))


def test_center_outside_frame():
    with pytest.raises(ValueError):
        face_centered_min_crop((1080, 1920), (1920, 10))


@given(st.integers(480, 2000), st.integers(416, 3000), st.floats(0, 1, exclude_max=True),
       st.floats(0, 1, exclude_max=True))
def test_crop_inside_frame(h, w, fx, fy):
    win = face_centered_min_crop((h, w), (fx * w, fy * h))
    assert win.inside((h, w)) and (win.height, win.width) == (CROP_H, CROP_W)


def test_enlarge_properties_over_seeds():
    dims = (1080, 1920)
    base = face_centered_min_crop(dims, (800, 500))
    rng = np.random.default_rng(5)
    factors = []
    for _ in range(1000):
        out = random_enlarge(base, dims, rng)
        assert out.contains(base) and out.inside(dims) and aspect_ok(out)
        factors.append(out.height / base.height)
    assert min(factors) >= 1.0 and max(factors) <= dims[0] / CROP_H + 1e-9
    assert max(factors) > 2.0  # the feasible range is actually explored


def test_enlarge_without_slack_is_identity():
    base = CropWindow(0, 0, 416, 480)
    assert random_enlarge(base, (480, 416), np.random.default_rng(0)) == base


def test_enlarge_fuzz():
    rng = np.random.default_rng(17)
    for _ in range(10_000):
        dims = (int(rng.integers(480, 2200)), int(rng.integers(416, 2200)))
        base = face_centered_min_crop(dims, (rng.uniform(0, dims[1]), rng.uniform(0, dims[0])))
        out = random_enlarge(base, dims, rng)
        assert out.inside(dims) and out.contains(base) and aspect_ok(out)


def test_crop_clip_maps_face_into_crop():
    clip = crop_clip(raw_single_clip(seed=4), np.random.default_rng(0))
    assert clip.frame_dims == (CROP_H, CROP_W)
    assert clip.identities[0].face_track.frame_dims == (CROP_H, CROP_W)


# --- pairing

def test_paired_boxes():
    a = cropped("a", (50, 100, 300, 400))
    b = cropped("b", (60, 90, 310, 380))
    pair = hconcat_pair(a, b)
    assert pair.frame_dims == (480, 832)
    assert [global_face_bbox(i.face_track).bbox for i in pair.identities] == [(50, 100, 300, 400),
                                                                               (476, 90, 726, 380)]


def test_pair_symmetry():
    a, b = cropped("a", (50, 100, 300, 400)), cropped("b", (60, 90, 310, 380), seed=1)
    ab, ba = hconcat_pair(a, b), hconcat_pair(b, a)
    assert [i.identity_id for i in ab.identities] == [i.identity_id for i in reversed(ba.identities)]
    assert ab.text == ba.text
    for left, right in ((ab.identities[0], ba.identities[1]), (ab.identities[1], ba.identities[0])):
        np.testing.assert_array_equal(left.audio, right.audio)
        shift = [(x0 - r0, x1 - r1) for (x0, _, x1, _), (r0, _, r1, _) in
                 zip(left.face_track.boxes, right.face_track.boxes)]
        assert set(shift) in ({(0, 0)}, {(416, 416)}, {(-416, -416)})


def test_pair_audio_bit_exact():
    a, b = cropped("a", (50, 100, 300, 400)), cropped("b", (60, 90, 310, 380), seed=1)
    pair = hconcat_pair(a, b)
    assert np.array_equal(pair.identities[0].audio, a.identities[0].audio)
    assert np.array_equal(pair.identities[1].audio, b.identities[0].audio)


def test_pair_trims_to_shorter():
    a = cropped("a", (50, 100, 300, 400), n_frames=9, n_audio=33)
    b = cropped("b", (60, 90, 310, 380), n_frames=5, n_audio=17)
    pair = hconcat_pair(a, b)
    assert pair.n_frames == 5
    assert all(len(i.face_track) == 5 and i.audio.shape[0] == 17 for i in pair.identities)


def test_pair_fps_mismatch():
    with pytest.raises(ValueError, match="fps"):
        hconcat_pair(cropped("a", (0, 0, 10, 10)), cropped("b", (0, 0, 10, 10), fps=25.0))


def test_pair_requires_crop():
    with pytest.raises(ValueError):
        hconcat_pair(raw_single_clip(), cropped("b", (0, 0, 10, 10)))


def test_pair_prompt_from_resource():
    prompts = dual_speaker_prompts()
    assert len(prompts) == 10
    assert hconcat_pair(cropped("a", (0, 0, 9, 9)), cropped("b", (0, 0, 9, 9))).text in prompts


# --- batch mode

def _batch(n):
    return [cropped(f"s{i}", (10 * i, 10, 10 * i + 50, 90), seed=i) for i in range(n)]


class _Fixed:
    def __init__(self, value):
        self.value = value

    def random(self):
        return self.value


def test_pair_mode_next_index():
    draw = select_batch_mode(_batch(4), _Fixed(0.1))
    assert draw.mode == "pair" and (draw.n_source, draw.n_items) == (4, 2)
    assert [s.meta["pair"] for s in draw.samples] == [["s0", "s1"], ["s2", "s3"]]


def test_single_mode_pass_through():
    batch = _batch(4)
    draw = select_batch_mode(batch, _Fixed(0.9))
    assert draw.mode == "single" and all(x is y for x, y in zip(draw.samples, batch))


def test_odd_pair_batch_drops_last():
    with pytest.warns(UserWarning, match="dropping"):
        draw = select_batch_mode(_batch(5), _Fixed(0.0))
    assert draw.dropped == ["s4"] and draw.n_items == 2


def test_pair_fraction_over_draws():
    rng = np.random.default_rng(2024)
    batch = _batch(2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        modes = [select_batch_mode(batch, rng).mode for _ in range(10_000)]
    assert 0.48 <= modes.count("pair") / len(modes) <= 0.52


def test_pairing_deterministic_given_order():
    a = select_batch_mode(_batch(4), _Fixed(0.0))
    b = select_batch_mode(_batch(4), _Fixed(0.0))
    for x, y in zip(a.samples, b.samples):
        assert x.text == y.text and x.clip_id == y.clip_id
        assert all(np.array_equal(i.audio, j.audio) for i, j in zip(x.identities, y.identities))


def test_manifest_loading(tmp_path):
    np.save(tmp_path / "a.npy", np.ones((5, 8)))
    track = FaceTrack(((10, 10, 50, 60),) * 2, "spk", (480, 416))
    (tmp_path / "a.track.json").write_text(json.dumps(track.to_json()))
    item = {"clip_id": "a", "frame_dims": [480, 416], "n_frames": 2, "text": "hi",
            "speakers": [{"identity_id": "spk", "audio_path": "a.npy", "face_track_path": "a.track.json"}]}
    (tmp_path / "m.ndjson").write_text(json.dumps(item) + "\n")
    (clip,) = load_manifest(tmp_path / "m.ndjson")
    assert clip.identities[0].face_track == track and clip.identities[0].audio.shape == (5, 8)
