import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from framers.clipio import (
    BACKGROUND,
    ClipSpec,
    InsufficientFramesError,
    VideoClip,
    denormalize,
    make_planted_clip,
    normalize,
    random_planted_clips,
    read_dataset,
    read_frames,
    sample_clip,
    write_frames,
    write_planted_dataset,
)
from framers.framemask import slots_to_combo


def indexed_source(n, h=8, w=8):
    """uint8 source whose every pixel of frame i equals i, so offsets are readable."""
    return np.broadcast_to(np.arange(n, dtype=np.uint8)[:, None, None, None], (n, h, w, 3)).copy()


def test_sample_clip_stride_and_offset():
    spec = ClipSpec(t_raw=16, stride=2, height=8, width=8)
    for seed in range(20):
        clip = sample_clip(indexed_source(64), spec, seed)
        picked = np.rint(clip.pixels[:, 0, 0, 0] * 255).astype(int)
        s = clip.source_offset
        assert 0 <= s <= 32
        assert picked.tolist() == list(range(s, s + 31, 2))
        assert picked[-1] - picked[0] + 1 == 31


def test_sample_clip_exact_length_has_offset_zero():
    spec = ClipSpec(t_raw=16, stride=2, height=8, width=8)
    for seed in range(10):
        assert sample_clip(indexed_source(31), spec, seed).source_offset == 0


def test_sample_clip_deterministic():
    spec = ClipSpec(t_raw=16, stride=2, height=8, width=8)
    src = np.random.default_rng(3).integers(0, 256, size=(80, 8, 8, 3), dtype=np.uint8)
    a, b = sample_clip(src, spec, 7), sample_clip(src, spec, 7)
    assert a.source_offset == b.source_offset
    assert np.array_equal(a.pixels, b.pixels)


def test_sample_clip_insufficient_frames():
    spec = ClipSpec(t_raw=16, stride=2, height=8, width=8)
    with pytest.raises(InsufficientFramesError, match="need 31 .* got 30"):
        sample_clip(indexed_source(30), spec, 0)


def test_sample_clip_resizes_into_unit_range():
    spec = ClipSpec(t_raw=4, stride=1, height=16, width=24)
    src = np.random.default_rng(0).integers(0, 256, size=(6, 9, 7, 3), dtype=np.uint8)
    clip = sample_clip(src, spec, 1)
    assert clip.shape == (4, 16, 24, 3)
    assert clip.pixels.min() >= 0 and clip.pixels.max() <= 1


@given(t_raw=st.integers(1, 32), stride=st.integers(1, 4), extra=st.integers(0, 10), seed=st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_sample_span_property(t_raw, stride, extra, seed):
    spec = ClipSpec(t_raw=t_raw, stride=stride, height=4, width=4)
    n = spec.span + extra
    clip = sample_clip(indexed_source(n, 4, 4), spec, seed)
    picked = np.rint(clip.pixels[:, 0, 0, 0] * 255).astype(int)
    assert picked[-1] - picked[0] + 1 == (t_raw - 1) * stride + 1
    assert 0 <= clip.source_offset <= extra


def test_planted_clip_slots(toy_spec):
    pc = make_planted_clip(toy_spec, (2, 5), rng_seed=11)
    px = pc.clip.pixels
    patterned = [t for t in range(16) if np.any(px[t] != BACKGROUND)]
    assert patterned == [4, 5, 10, 11]
    assert np.all(np.delete(px, patterned, axis=0) == 0.5)
    assert pc.planted_slots == (2, 5)


def test_planted_all_slots_has_no_constant_frames(toy_spec):
    pc = make_planted_clip(toy_spec, range(8), rng_seed=0)
    assert all(np.any(f != BACKGROUND) for f in pc.clip.pixels)


def test_planted_seed_changes_pattern_only(toy_spec):
    a = make_planted_clip(toy_spec, (1, 6), rng_seed=1).clip.pixels
    b = make_planted_clip(toy_spec, (1, 6), rng_seed=2).clip.pixels
    assert not np.array_equal(a, b)
    rest = [t for t in range(16) if t // 2 not in (1, 6)]
    assert np.array_equal(a[rest], b[rest])
    assert np.array_equal(a, make_planted_clip(toy_spec, (1, 6), rng_seed=1).clip.pixels)


@pytest.mark.parametrize("slots", [(8,), (-1,), (), (3, 3)])
def test_planted_rejects_bad_slots(toy_spec, slots):
    with pytest.raises(ValueError):
        make_planted_clip(toy_spec, slots, 0)


def test_planted_pair_histogram_is_uniform(toy_spec):
    spec = ClipSpec(height=8, width=8)
    clips = random_planted_clips(spec, 2800, seed=5)
    counts = np.bincount([slots_to_combo(pc.planted_slots) for pc in clips], minlength=28)
    assert stats.chisquare(counts).pvalue > 0.01


def test_normalize_round_trip_exhaustive():
    raw = np.arange(256, dtype=np.uint8).reshape(1, 16, 16, 1)
    clip = normalize(raw)
    assert clip.pixels.flat[0] == 0.0
    assert clip.pixels.flat[255] == 1.0
    assert clip.pixels.flat[128] == np.float32(128 / 255)
    assert np.array_equal(denormalize(clip), raw)


def test_normalize_rejects_out_of_range():
    with pytest.raises(ValueError):
        normalize(np.array([[[[256]]]]))
    with pytest.raises(ValueError):
        normalize(np.array([[[[-1]]]]))
    with pytest.raises(ValueError):
        denormalize(np.array([[[[1.5]]]]))


def test_video_clip_rejects_bad_values():
    with pytest.raises(ValueError):
        VideoClip(np.full((1, 2, 2, 3), np.nan))
    with pytest.raises(ValueError):
        VideoClip(np.full((1, 2, 2, 3), 2.0))


@pytest.mark.parametrize("fmt", ["png", "raw"])
def test_frame_directory_round_trip(tmp_path, fmt):
    frames = np.random.default_rng(0).integers(0, 256, size=(5, 6, 7, 3), dtype=np.uint8)
    write_frames(frames, tmp_path / "clip", fmt=fmt, fps=25)
    manifest = json.loads((tmp_path / "clip" / "manifest.json").read_text())
    assert manifest["fps"] == 25 and manifest["frames"] == 5
    assert np.array_equal(read_frames(tmp_path / "clip"), frames)


def test_planted_dataset_layout(tmp_path):
    spec = ClipSpec(height=16, width=16)
    clips = random_planted_clips(spec, 3, seed=0)
    write_planted_dataset(clips, tmp_path)
    loaded, labels = read_dataset(tmp_path)
    assert [c.clip_id for c in loaded] == [pc.clip.clip_id for pc in clips]
    assert labels == {pc.clip.clip_id: list(pc.planted_slots) for pc in clips}
    for got, pc in zip(loaded, clips):
        assert np.array_equal(denormalize(got), denormalize(pc.clip))
