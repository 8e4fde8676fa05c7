import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtaldm.data import (
    ClipRecord,
    FeatureFormatError,
    ManifestError,
    SynthSpec,
    augment_manifest,
    clean_filter,
    clip_rng,
    concat_augment,
    flow_from_features,
    read_features,
    read_manifest,
    render_clip,
    sample_onsets,
    split,
    synth_dataset,
    write_features,
    write_manifest,
)
from vtaldm.dsp import AudioClip, detect_peaks, mel_spectrogram, onset_envelope, read_wav


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    recs = synth_dataset(SynthSpec(n_clips=12, seed=3), out)
    return out, recs


def rec(i, sem, align, label=0):
    return ClipRecord(id=f"r{i}", audio_path="a.wav", feature_path="f.vtaf", label=label,
                      duration=4.0, semantic_score=sem, align_score=align)


class TestFeatureIO:
    def test_roundtrip_bitwise(self, tmp_path):
        m = np.random.default_rng(0).normal(size=(250, 16)).astype(np.float32)
        write_features(tmp_path / "f.vtaf", m)
        back = read_features(tmp_path / "f.vtaf")
        assert back.dtype == np.float32
        assert back.tobytes() == m.tobytes()

    def test_header_layout(self, tmp_path):
        write_features(tmp_path / "f.vtaf", np.zeros((10, 3)))
        buf = (tmp_path / "f.vtaf").read_bytes()
        assert buf[:4] == b"VTAF"
        assert np.frombuffer(buf[4:16], dtype="<u4").tolist() == [1, 10, 3]
        assert len(buf) == 16 + 10 * 3 * 4

    def test_bad_magic(self, tmp_path):
        write_features(tmp_path / "f.vtaf", np.zeros((10, 3)))
        buf = (tmp_path / "f.vtaf").read_bytes()
        (tmp_path / "f.vtaf").write_bytes(b"XXXX" + buf[4:])
        with pytest.raises(FeatureFormatError, match="magic"):
            read_features(tmp_path / "f.vtaf")

    def test_truncated_payload(self, tmp_path):
        write_features(tmp_path / "f.vtaf", np.zeros((10, 3)))
        buf = (tmp_path / "f.vtaf").read_bytes()
        (tmp_path / "f.vtaf").write_bytes(buf[:-12])
        with pytest.raises(FeatureFormatError, match="truncat"):
            read_features(tmp_path / "f.vtaf")

    def test_zero_frames(self, tmp_path):
        with pytest.raises((FeatureFormatError, ValueError)):
            write_features(tmp_path / "f.vtaf", np.zeros((0, 3)))

    def test_nonfinite(self, tmp_path):
        with pytest.raises(ValueError):
            write_features(tmp_path / "f.vtaf", np.full((2, 2), np.nan))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_roundtrip_property(self, tmp_path_factory, frames, dim, seed):
        path = tmp_path_factory.mktemp("vtaf") / "x.vtaf"
        m = np.random.default_rng(seed).normal(size=(frames, dim)).astype(np.float32)
        write_features(path, m)
        np.testing.assert_array_equal(read_features(path), m)


class TestManifest:
    def test_roundtrip_relative_paths(self, tmp_path, small_set):
        _, recs = small_set
        write_manifest(tmp_path / "m.jsonl", recs)
        line = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
        assert not line["audio_path"].startswith("/")
        back = read_manifest(tmp_path / "m.jsonl")
        assert [r.id for r in back] == [r.id for r in recs]
        assert all(a.label == b.label and a.align_score == b.align_score for a, b in zip(back, recs))

    def test_unknown_field(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps({**rec(0, 1, 1).__dict__, "colour": 1}) + "\n")
        with pytest.raises(ManifestError, match="unknown"):
            read_manifest(tmp_path / "m.jsonl", check_files=False)

    def test_duplicate_ids(self, tmp_path):
        line = json.dumps({k: v for k, v in rec(0, 1, 1).__dict__.items() if v is not None})
        (tmp_path / "m.jsonl").write_text(line + "\n" + line + "\n")
        with pytest.raises(ManifestError, match="duplicate"):
            read_manifest(tmp_path / "m.jsonl", check_files=False)
        with pytest.raises(ManifestError):
            write_manifest(tmp_path / "n.jsonl", [rec(0, 1, 1), rec(0, 1, 1)])

    def test_missing_file(self, tmp_path):
        write_manifest(tmp_path / "m.jsonl", [rec(0, 1, 1)])
        with pytest.raises(ManifestError, match="missing"):
            read_manifest(tmp_path / "m.jsonl")


class TestSynth:
    def test_no_events(self, tmp_path):
        recs = synth_dataset(SynthSpec(n_clips=2, events_per_clip=(0, 0)), tmp_path)
        for r in recs:
            assert np.all(read_wav(r.audio_path).samples == 0)
            assert np.all(read_features(r.feature_path) == 0)

    def test_onset_peak_at_expected_frame(self):
        spec = SynthSpec()
        audio, feats = render_clip(spec, 0, [1.0], clip_rng(0, 0))
        env = onset_envelope(mel_spectrogram(AudioClip(audio)))
        peaks = detect_peaks(env)
        assert len(peaks) == 1 and abs(peaks[0] - round(1.0 * 62.5)) <= 1
        assert int(np.flatnonzero(feats[:, 0])[0]) == round(1.0 * 62.5)

    def test_features_follow_audio(self, small_set):
        _, recs = small_set
        for r in recs:
            feats = read_features(r.feature_path)
            assert feats.shape == (250, 16)
            assert np.all(feats[:, 4:] == 0)
            active = np.flatnonzero(feats.any(axis=1))
            assert set(np.unique(np.argmax(feats[active], axis=1))) == {r.label}
            starts = [f for f in active if f == 0 or not feats[f - 1].any()]
            peaks = detect_peaks(onset_envelope(mel_spectrogram(read_wav(r.audio_path))))
            assert len(peaks) == len(starts)
            assert all(abs(p - s) <= 1 for p, s in zip(peaks, starts))

    def test_text_and_flow(self, small_set):
        _, recs = small_set
        r = recs[0]
        text = read_features(r.text_emb_path)
        assert text.shape == (1, 16) and text[0, r.label] == 1 and text.sum() == 1
        feats = read_features(r.feature_path)
        np.testing.assert_array_equal(read_features(r.flow_path), flow_from_features(feats))

    def test_scores(self, small_set):
        _, recs = small_set
        assert all(r.semantic_score == 1.0 for r in recs)
        assert all(r.align_score == 1.0 for r in recs)

    def test_deterministic_bytes(self, tmp_path):
        a = synth_dataset(SynthSpec(n_clips=3, seed=9), tmp_path / "a")
        b = synth_dataset(SynthSpec(n_clips=3, seed=9), tmp_path / "b")
        for ra, rb in zip(a, b):
            for k in ("audio_path", "feature_path", "text_emb_path", "flow_path"):
                assert open(getattr(ra, k), "rb").read() == open(getattr(rb, k), "rb").read()
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()

    def test_corrupted_records_are_filtered(self, tmp_path):
        recs = synth_dataset(SynthSpec(n_clips=10, n_corrupt=3, seed=1), tmp_path)
        assert sum(r.semantic_score == 0.0 for r in recs) == 3
        kept = clean_filter(recs)
        assert len(kept) == 7 and all(r.semantic_score == 1.0 for r in kept)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_onsets_separated(self, seed, n):
        spec = SynthSpec()
        on = sample_onsets(spec, n, np.random.default_rng(seed))
        assert np.all(np.diff(on) >= spec.event_len + spec.min_gap - 1e-12)
        assert on[0] >= 0.2 and on[-1] + spec.event_len <= spec.clip_len

    @pytest.mark.parametrize("kw", [
        dict(tone_freqs=(262.0, 392.0, 523.0, 9000.0)),
        dict(event_len=5.0),
        dict(events_per_clip=(3, 1)),
        dict(n_classes=3),
        dict(events_per_clip=(1, 20)),
    ])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)


class TestConcat:
    def pair(self, small_set):
        _, recs = small_set
        a = recs[0]
        b = next(r for r in recs if r.label != a.label)
        return a, b

    def test_layout(self, small_set, tmp_path):
        a, b = self.pair(small_set)
        out = concat_augment(a, b, np.random.default_rng(0), tmp_path)
        first, second = (a, b) if out.parts[0] == a.label else (b, a)
        assert out.duration == 8.0 and out.boundary == 4.0
        feats = read_features(out.feature_path)
        assert feats.shape == (500, 16)
        np.testing.assert_array_equal(feats[250:], read_features(second.feature_path))
        np.testing.assert_array_equal(feats[:250], read_features(first.feature_path))
        assert out.label == first.label and out.parts == [first.label, second.label]

    def test_energy_preserved(self, small_set, tmp_path):
        a, b = self.pair(small_set)
        out = concat_augment(a, b, np.random.default_rng(1), tmp_path)
        xa, xb, xo = (read_wav(p).samples.astype(np.float64) for p in (a.audio_path, b.audio_path, out.audio_path))
        assert len(xo) == len(xa) + len(xb)
        lhs = np.mean(xo ** 2) * len(xo)
        rhs = np.mean(xa ** 2) * len(xa) + np.mean(xb ** 2) * len(xb)
        assert abs(lhs - rhs) <= 1e-6 * rhs

    def test_order_follows_rng(self, small_set, tmp_path):
        a, b = self.pair(small_set)
        orders = {tuple(concat_augment(a, b, np.random.default_rng(s), tmp_path / str(s)).parts) for s in range(8)}
        assert orders == {(a.label, b.label), (b.label, a.label)}

    def test_same_label_rejected(self, small_set, tmp_path):
        a, _ = self.pair(small_set)
        with pytest.raises(ValueError, match="different"):
            concat_augment(a, a, np.random.default_rng(0), tmp_path)

    def test_augment_manifest(self, small_set, tmp_path):
        _, recs = small_set
        out = augment_manifest(recs, 3, seed=0, out_dir=tmp_path)
        assert out[:len(recs)] == recs and len(out) == len(recs) + 3
        assert all(r.parts[0] != r.parts[1] for r in out[len(recs):])


class TestFilterSplit:
    def test_thresholds_strict(self):
        recs = [rec(0, 0.30, 0.9), rec(1, 0.31, 0.25), rec(2, 0.9, 0.2), rec(3, 0.9, 0.21)]
        assert [r.id for r in clean_filter(recs)] == ["r1", "r3"]

    def test_missing_scores(self):
        with pytest.raises(ManifestError):
            clean_filter([rec(0, None, 0.5)])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=30))
    def test_subsequence_and_idempotent(self, scores):
        recs = [rec(i, s, a) for i, (s, a) in enumerate(scores)]
        once = clean_filter(recs)
        ids = [r.id for r in recs]
        positions = [ids.index(r.id) for r in once]
        assert positions == sorted(positions)
        assert clean_filter(once) == once

    def test_split_sizes(self):
        recs = [rec(i, 1, 1) for i in range(100)]
        tr, va, te = split(recs, (0.8, 0.1, 0.1), seed=0)
        assert (len(tr), len(va), len(te)) == (80, 10, 10)
        assert {r.id for r in tr + va + te} == {r.id for r in recs}
        assert [r.id for r in split(recs, seed=0)[0]] == [r.id for r in tr]
        assert [r.id for r in split(recs, seed=1)[0]] != [r.id for r in tr]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 60), st.integers(0, 1000))
    def test_split_partition(self, n, seed):
        recs = [rec(i, 1, 1) for i in range(n)]
        parts = split(recs, (0.6, 0.3, 0.1), seed)
        ids = [r.id for p in parts for r in p]
        assert sorted(ids) == sorted(r.id for r in recs)

    @pytest.mark.parametrize("fr", [(0.5, 0.6), (1.0, 0.0), (-0.2, 1.2), ()])
    def test_bad_fractions(self, fr):
        with pytest.raises(ValueError):
            split([rec(0, 1, 1)], fr)
