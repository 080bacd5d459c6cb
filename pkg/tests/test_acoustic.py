import numpy as np
import pytest

from ctcprobe import acoustic
from ctcprobe.acoustic import (PhoneSegment, Spectrogram, SynthConfig,
                               Utterance, decode_transcript, frame_label,
                               hamming_window, spectrogram,
                               synthesize_corpus)


class TestHammingWindow:
    def test_single_point_convention(self):
        assert hamming_window(1).tolist() == [1.0]

    def test_three_points(self):
        np.testing.assert_allclose(hamming_window(3), [0.08, 1.0, 0.08],
                                   atol=1e-12)

    def test_symmetry(self):
        w = hamming_window(320)
        np.testing.assert_allclose(w, w[::-1], atol=1e-12)

    def test_zero_length_rejected(self):
        with pytest.raises(ValueError):
            hamming_window(0)


class TestSpectrogram:
    def test_one_second_shape(self):
        spec = spectrogram(np.zeros(16000))
        assert spec.n_frames == 99
        assert spec.n_bins == 161

    def test_length_formula(self):
        # T = floor((len - win)/hop) + 1 for assorted lengths
        for n in (320, 321, 479, 480, 481, 5000):
            spec = spectrogram(np.zeros(n))
            assert spec.n_frames == (n - 320) // 160 + 1

    def test_all_zero_samples(self):
        spec = spectrogram(np.zeros(1600))
        assert np.all(spec.frames == 0.0)

    def test_sinusoid_peaks_at_its_bin(self):
        # Bin k of a 320-point window sits at k * 16000/320 = 50k Hz.
        freq_bin = 40
        t = np.arange(16000) / 16000.0
        samples = np.sin(2 * np.pi * (freq_bin * 50.0) * t)
        spec = spectrogram(samples)
        assert np.all(np.argmax(spec.frames, axis=1) == freq_bin)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            spectrogram(np.zeros(100))

    def test_log_compress_flag(self):
        samples = np.random.default_rng(0).normal(size=1600)
        lin = spectrogram(samples)
        logged = spectrogram(samples, log_compress=True)
        np.testing.assert_allclose(logged.frames, np.log1p(lin.frames))

    def test_negative_magnitudes_rejected(self):
        with pytest.raises(ValueError):
            Spectrogram(np.array([[-1.0, 0.0]]))


class TestSynthesizeCorpus:
    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(seed=42)
        a = synthesize_corpus(cfg, 5)
        b = synthesize_corpus(SynthConfig(seed=42), 5)
        assert len(a) == len(b) == 5
        for ua, ub in zip(a, b):
            assert np.array_equal(ua.spectrogram.frames, ub.spectrogram.frames)
            assert ua.transcript == ub.transcript
            assert ua.segments == ub.segments

    def test_zero_noise_equals_template(self):
        cfg = SynthConfig(phone_inventory_size=2, noise_stddev=0.0, seed=3)
        for utt in synthesize_corpus(cfg, 4):
            for seg in utt.segments:
                template = acoustic.phone_template(cfg, seg.phone)
                block = utt.spectrogram.frames[seg.start_frame:seg.end_frame]
                np.testing.assert_array_equal(
                    block, np.broadcast_to(block[0], block.shape))
                np.testing.assert_allclose(block[0], template)

    def test_phone_frequencies_roughly_uniform(self):
        cfg = SynthConfig(seed=0)
        corpus = synthesize_corpus(cfg, 100)
        counts = {p: 0 for p in cfg.phones}
        total = 0
        for utt in corpus:
            for seg in utt.segments:
                counts[seg.phone] += 1
                total += 1
        expected = total / len(cfg.phones)
        for phone, n in counts.items():
            assert abs(n - expected) <= 0.2 * total, phone

    def test_transcripts_decode_to_phone_sequence(self):
        cfg = SynthConfig(seed=9)
        for utt in synthesize_corpus(cfg, 20):
            phones = [seg.phone for seg in utt.segments]
            assert decode_transcript(utt.transcript, cfg.phone_to_chars) == phones

    def test_segments_tile_the_utterance(self):
        for utt in synthesize_corpus(SynthConfig(seed=1), 10):
            acoustic.check_segments(utt.segments, utt.n_frames)

    def test_prefix_code_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(phone_inventory_size=2,
                        phone_to_chars={"p00": "a", "p01": "ab"})

    def test_magnitudes_clamped_non_negative(self):
        cfg = SynthConfig(noise_stddev=5.0, seed=2)
        for utt in synthesize_corpus(cfg, 3):
            assert np.all(utt.spectrogram.frames >= 0.0)


def _utterance(segment_spec, n_bins=4):
    total = segment_spec[-1][2]
    segs = [PhoneSegment(p, a, b) for p, a, b in segment_spec]
    return Utterance(Spectrogram(np.zeros((total, n_bins))), segs, "", "u0")


class TestFrameLabel:
    def test_identity_mapping(self):
        utt = _utterance([("p00", 0, 3), ("p01", 3, 7)])
        got = [frame_label(utt, t) for t in range(7)]
        assert got == ["p00"] * 3 + ["p01"] * 4

    def test_single_segment_any_factor(self):
        utt = _utterance([("p05", 0, 12)])
        for factor in (1, 2, 3):
            for t in range(12 // factor):
                assert frame_label(utt, t, factor) == "p05"

    def test_factor_two_matches_brute_force(self):
        utt = _utterance([("p00", 0, 6), ("p01", 6, 12)])
        for t in range(6):
            direct = next(s.phone for s in utt.segments
                          if s.start_frame <= 2 * t < s.end_frame)
            assert frame_label(utt, t, subsample_factor=2) == direct

    def test_offset_applies_before_lookup(self):
        utt = _utterance([("p00", 0, 2), ("p01", 2, 4)])
        assert frame_label(utt, 0, 2, receptive_center_offset=2) == "p01"

    def test_out_of_range(self):
        utt = _utterance([("p00", 0, 4)])
        with pytest.raises(ValueError):
            frame_label(utt, 4)
        with pytest.raises(ValueError):
            frame_label(utt, 2, subsample_factor=3)


class TestCorpusSerialization:
    def test_round_trip(self, tmp_path):
        corpus = synthesize_corpus(SynthConfig(seed=5), 6)
        path = tmp_path / "corpus.jsonl"
        acoustic.save_corpus(path, corpus)
        loaded = acoustic.load_corpus(path)
        assert len(loaded) == len(corpus)
        for orig, got in zip(corpus, loaded):
            assert got.id == orig.id
            assert got.transcript == orig.transcript
            assert got.segments == orig.segments
            np.testing.assert_array_equal(
                got.spectrogram.frames,
                orig.spectrogram.frames.astype(np.float32).astype(np.float64))

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "other.jsonl"
        path.write_text('{"format": "something-else"}\n')
        with pytest.raises(ValueError):
            acoustic.load_corpus(path)


class TestTimitImport:
    def test_empty_directory(self, tmp_path):
        utts, errors = acoustic.import_timit_dir(tmp_path)
        assert utts == [] and errors == []

    def test_sample_range_to_frames(self, tmp_path):
        # [0, 1600) at 16 kHz with hop 160 covers frame slots 0..9.
        rng = np.random.default_rng(0)
        samples = 0.1 * rng.standard_normal(3200)
        acoustic.export_timit_dir(
            tmp_path, [("u0", samples,
                        [(0, 1600, "aa"), (1600, 3200, "iy")], "hi")])
        utts, errors = acoustic.import_timit_dir(tmp_path)
        assert errors == []
        (utt,) = utts
        assert utt.segments[0] == PhoneSegment("aa", 0, 10)
        assert utt.segments[0].end_frame - utt.segments[0].start_frame == 10

    def test_round_trip_against_direct_spectrogram(self, tmp_path):
        rng = np.random.default_rng(7)
        samples = 0.2 * rng.standard_normal(16000)
        segs = [(0, 8000, "aa"), (8000, 16000, "iy")]
        acoustic.export_timit_dir(tmp_path, [("u1", samples, segs, "a b")])
        utts, errors = acoustic.import_timit_dir(tmp_path)
        assert errors == []
        (utt,) = utts
        # Compare against the spectrogram of the quantized waveform.
        pcm = np.clip(samples * 32768.0, -32768, 32767).astype("<i2")
        direct = spectrogram(pcm.astype(np.float64) / 32768.0)
        n = utt.n_frames
        np.testing.assert_allclose(utt.spectrogram.frames,
                                   direct.frames[:n], atol=1e-12)
        assert utt.segments[0].phone == "aa"
        assert utt.segments[0].start_frame == 0
        assert utt.segments[0].end_frame == 50
        assert utt.segments[1].phone == "iy"
        assert utt.segments[1].end_frame == n
        assert utt.transcript == "a b"

    def test_edge_silence_trimmed(self, tmp_path):
        rng = np.random.default_rng(1)
        samples = 0.1 * rng.standard_normal(9600)
        segs = [(0, 3200, "h#"), (3200, 6400, "aa"), (6400, 9600, "h#")]
        acoustic.export_timit_dir(tmp_path, [("u2", samples, segs, "")])
        utts, errors = acoustic.import_timit_dir(tmp_path)
        assert errors == []
        (utt,) = utts
        assert [s.phone for s in utt.segments] == ["aa"]

    def test_missing_phn_reported_not_fatal(self, tmp_path):
        rng = np.random.default_rng(2)
        acoustic.export_timit_dir(
            tmp_path, [("ok", 0.1 * rng.standard_normal(3200),
                        [(0, 3200, "aa")], "")])
        (tmp_path / "broken.wav").write_bytes(b"not audio")
        utts, errors = acoustic.import_timit_dir(tmp_path)
        assert len(utts) == 1 and utts[0].id == "ok"
        assert len(errors) == 1 and "broken" in errors[0][0]
