import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgeryloc.config import CorpusConfig
from forgeryloc.corpus import (CorpusError, ForgerySegment, FrameLabelTrack,
                               InfeasibleConfigError, deraster_segments, generate_corpus,
                               load_corpus, rasterize_labels, read_wav, synth_clip, write_corpus)
from forgeryloc.frontend import extract_features
from helpers import small_corpus_config


def midpoint_oracle(segments, duration_s, period):
    n = int(round(duration_s / period))
    y = []
    for t in range(n):
        mid = (t + 0.5) * period
        y.append(int(any(s.start_s <= mid < s.start_s + s.dur_s for s in segments)))
    return np.array(y)


# --- synthesis -------------------------------------------------------------

def test_zero_segments_gives_all_real_track():
    cfg = CorpusConfig(n_segments_min=0, n_segments_max=0)
    clip, segs = synth_clip(7, cfg)
    assert segs == []
    assert rasterize_labels(segs, clip.duration_s).y_fake.sum() == 0


def test_same_seed_is_bit_identical():
    cfg = CorpusConfig()
    a, sa = synth_clip(7, cfg)
    b, sb = synth_clip(7, cfg)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert sa == sb


def test_different_seeds_differ():
    cfg = CorpusConfig()
    assert not np.array_equal(synth_clip(7, cfg)[0].samples, synth_clip(8, cfg)[0].samples)


def test_two_short_segments_in_four_seconds():
    cfg = CorpusConfig(n_segments_min=2, n_segments_max=2, seg_dur_min_s=0.1, seg_dur_max_s=0.1)
    clip, segs = synth_clip(7, cfg)
    assert clip.duration_s == pytest.approx(4.0)
    assert len(segs) == 2
    assert segs[0].end_s <= segs[1].start_s
    for s in segs:
        assert abs(s.dur_s - 0.1) <= 0.02 + 1e-9
        assert 0.0 <= s.start_s and s.end_s <= clip.duration_s + 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_max=st.integers(0, 5))
def test_segments_sorted_disjoint_and_gapped(seed, n_max):
    cfg = CorpusConfig(duration_min_s=2.0, duration_max_s=3.0, n_segments_max=n_max,
                       seg_dur_max_s=0.4)
    clip, segs = synth_clip(seed, cfg)
    assert len(segs) <= n_max
    for a, b in zip(segs, segs[1:]):
        assert b.start_s - a.end_s >= cfg.min_gap_s - 1e-9
    for s in segs:
        assert s.start_s >= 0 and s.end_s <= clip.duration_s + 1e-9
        assert cfg.seg_dur_min_s - 0.02 <= s.dur_s <= cfg.seg_dur_max_s + 0.02
    assert np.max(np.abs(clip.samples)) <= 1.0


def test_infeasible_config_raises():
    cfg = CorpusConfig(duration_min_s=1.0, duration_max_s=1.0, n_segments_min=4,
                       n_segments_max=4, seg_dur_min_s=0.5, seg_dur_max_s=0.5)
    with pytest.raises(InfeasibleConfigError):
        synth_clip(0, cfg)


def test_bad_strength_range_raises():
    with pytest.raises(InfeasibleConfigError):
        synth_clip(0, CorpusConfig(forgery_strength_min=0.5, forgery_strength_max=0.2))


def test_distractors_do_not_move_forgeries():
    base = CorpusConfig(distractor_rate_hz=0.0)
    busy = dataclasses.replace(base, distractor_rate_hz=3.0)
    _, s0 = synth_clip(11, base)
    _, s1 = synth_clip(11, busy)
    assert s0 == s1


@pytest.mark.parametrize("kind", ["tilted_noise", "ring_mod"])
def test_forged_region_is_spectrally_different(kind):
    cfg = CorpusConfig(n_segments_min=1, n_segments_max=1, seg_dur_min_s=0.6, seg_dur_max_s=0.6,
                       forgery_strength_min=1.0, forgery_strength_max=1.0, distractor_rate_hz=0,
                       forgery_kind=kind)
    clip, (seg,) = synth_clip(3, cfg)
    feats = extract_features(clip.samples).data
    fake = rasterize_labels([seg], clip.duration_s).y_fake.astype(bool)
    real = np.flatnonzero(~fake)
    # the forged profile sits far from the genuine one; two genuine halves sit close
    forged_gap = np.linalg.norm(feats[fake].mean(0) - feats[real].mean(0))
    genuine_gap = np.linalg.norm(feats[real[::2]].mean(0) - feats[real[1::2]].mean(0))
    assert forged_gap > 10 * genuine_gap


# --- rasterization ---------------------------------------------------------

def test_rasterize_empty():
    tr = rasterize_labels([], 2.0, 0.02)
    assert tr.n_frames == 100
    assert tr.y_fake.sum() == 0 and tr.y_boundary.sum() == 0


def test_rasterize_one_segment():
    tr = rasterize_labels([ForgerySegment(1.0, 0.5)], 2.0, 0.02)
    np.testing.assert_array_equal(np.flatnonzero(tr.y_fake), np.arange(50, 75))
    np.testing.assert_array_equal(np.flatnonzero(tr.y_boundary), [50, 74])
    np.testing.assert_array_equal(tr.y_fake, midpoint_oracle([ForgerySegment(1.0, 0.5)], 2.0, 0.02))


def test_rasterize_full_cover():
    tr = rasterize_labels([ForgerySegment(0.0, 2.0)], 2.0, 0.02)
    assert tr.y_fake.all()
    np.testing.assert_array_equal(np.flatnonzero(tr.y_boundary), [0, 99])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 3.9), st.floats(0.005, 1.0)), max_size=5))
def test_rasterize_matches_midpoint_oracle(raw):
    segs = [ForgerySegment(s, d) for s, d in raw]
    np.testing.assert_array_equal(rasterize_labels(segs, 4.0).y_fake,
                                  midpoint_oracle(segs, 4.0, 0.02))


def test_deraster_examples():
    y = np.zeros(100, dtype=np.int8)
    y[50:75] = 1
    assert deraster_segments(FrameLabelTrack(y, y)) == [ForgerySegment(1.0, 0.5)]
    y = np.zeros(12, dtype=np.int8)
    y[[3, 4, 9]] = 1
    assert deraster_segments(FrameLabelTrack(y, y)) == [ForgerySegment(0.06, 0.04),
                                                       ForgerySegment(0.18, 0.02)]
    assert deraster_segments(FrameLabelTrack(np.zeros(5), np.zeros(5))) == []


def test_raster_roundtrip_on_generated_clips():
    for clip, segs in generate_corpus(small_corpus_config(n_clips=10)):
        back = deraster_segments(rasterize_labels(segs, clip.duration_s))
        assert len(back) == len(segs)
        for a, b in zip(back, segs):
            assert abs(a.start_s - b.start_s) <= 0.02 and abs(a.end_s - b.end_s) <= 0.02


# --- on-disk format --------------------------------------------------------

def test_write_load_roundtrip(tmp_path):
    cc = small_corpus_config()
    clips = generate_corpus(cc)
    written = write_corpus(clips, tmp_path / "c", cc.seed, cc)
    loaded = load_corpus(tmp_path / "c")
    assert loaded == written
    for (clip, _), rec in zip(clips, loaded.clips):
        back = loaded.load_clip(rec)
        assert back.sample_rate == clip.sample_rate
        np.testing.assert_allclose(back.samples, clip.samples, atol=1 / 32767)


def test_rewrite_is_byte_identical(tmp_path):
    cc = small_corpus_config()
    write_corpus(generate_corpus(cc), tmp_path / "a", cc.seed, cc)
    first = load_corpus(tmp_path / "a")
    again = [(first.load_clip(r), r.segments) for r in first.clips]
    write_corpus(again, tmp_path / "b", cc.seed, cc)
    for r in first.clips:
        assert (tmp_path / "a" / r.audio).read_bytes() == (tmp_path / "b" / r.audio).read_bytes()
    assert ((tmp_path / "a" / "manifest.jsonl").read_bytes()
            == (tmp_path / "b" / "manifest.jsonl").read_bytes())


def test_load_empty_dir(tmp_path):
    with pytest.raises(CorpusError, match="manifest not found"):
        load_corpus(tmp_path)


def test_missing_audio_names_clip(small_corpus):
    m = load_corpus(small_corpus)
    (small_corpus / m.clips[1].audio).unlink()
    with pytest.raises(CorpusError, match=m.clips[1].id):
        load_corpus(small_corpus)


def test_corrupt_manifest_line(small_corpus):
    path = small_corpus / "manifest.jsonl"
    rows = path.read_text().splitlines()
    bad = json.loads(rows[0])
    del bad["segments"]
    path.write_text("\n".join([json.dumps(bad)] + rows[1:]) + "\n")
    with pytest.raises(CorpusError, match=bad["id"]):
        load_corpus(small_corpus)


def test_corrupt_wav(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"RIFF0000WAVEjunk")
    with pytest.raises(CorpusError, match="x"):
        read_wav(p)
