"""Feature frontend: resampling, STFT, mel filterbank, log-mel, cache file."""

import math

import numpy as np
import pytest

from asckit import dsp
from asckit.errors import ConfigError, FormatError, InputError


def sine(freq, seconds, rate, phase=0.0):
    t = np.arange(int(seconds * rate)) / rate
    return np.sin(2 * np.pi * freq * t + phase)


class TestPreprocess:
    def test_opposite_stereo_cancels(self):
        x = sine(440.0, 1.0, 22050)
        stereo = np.stack([x, -x], axis=1)
        seg = dsp.preprocess(stereo, 22050)
        np.testing.assert_allclose(seg.samples, 0.0, atol=1e-15)

    def test_dc_removed(self):
        seg = dsp.preprocess(np.full(22050, 0.3), 22050)
        np.testing.assert_allclose(seg.samples, 0.0, atol=1e-12)

    def test_mean_zero_after_preprocess(self):
        rng = np.random.default_rng(0)
        seg = dsp.preprocess(rng.standard_normal(48000 * 2) + 0.25, 48000)
        assert abs(seg.samples.mean()) < 1e-9

    def test_resampled_tone_keeps_its_frequency(self):
        seg = dsp.preprocess(sine(1000.0, 10.0, 48000), 48000)
        assert seg.sample_rate == 22050
        assert len(seg.samples) == 220500
        spec = np.abs(np.fft.rfft(seg.samples))
        freqs = np.fft.rfftfreq(len(seg.samples), 1.0 / 22050)
        peak = np.argmax(spec)
        bin_width = freqs[1] - freqs[0]
        assert abs(freqs[peak] - 1000.0) <= bin_width

    def test_44100_supported(self):
        seg = dsp.preprocess(sine(500.0, 1.0, 44100), 44100)
        assert len(seg.samples) == 22050

    def test_empty_signal_rejected(self):
        with pytest.raises(InputError):
            dsp.preprocess(np.zeros(0), 48000)

    def test_unsupported_rate_rejected(self):
        with pytest.raises(ConfigError):
            dsp.preprocess(np.zeros(100), 96000)


class TestStftPower:
    def test_frame_count_rule(self):
        seg = dsp.AudioSegment(np.zeros(220500), 22050)
        power = dsp.stft_power(seg)
        assert power.shape == (1025, 220500 // 430 + 1)
        assert power.shape[1] == 513

    def test_zero_signal_zero_spectrogram(self):
        seg = dsp.AudioSegment(np.zeros(5000), 22050)
        np.testing.assert_array_equal(dsp.stft_power(seg), 0.0)

    def test_impulse_frames_are_flat_and_satisfy_parseval(self):
        n = 220500
        x = np.zeros(n)
        center = n // 2
        x[center] = 1.0
        seg = dsp.AudioSegment(x, 22050)
        power = dsp.stft_power(seg)
        window = np.hamming(2048 + 1)[:-1]
        hits = 0
        for t in range(power.shape[1]):
            i = center - t * 430 + 1024  # impulse index within frame t
            if 0 <= i < 2048:
                hits += 1
                np.testing.assert_allclose(power[:, t], window[i] ** 2,
                                           rtol=0, atol=1e-12)
                # Parseval for rfft of a real frame
                spectral = (power[0, t] + power[-1, t]
                            + 2 * power[1:-1, t].sum()) / 2048
                assert abs(spectral - window[i] ** 2) < 1e-9
        assert hits >= 4

    def test_short_signal_rejected(self):
        with pytest.raises(InputError):
            dsp.stft_power(dsp.AudioSegment(np.zeros(100), 22050))

    def test_wrong_rate_rejected(self):
        with pytest.raises(InputError):
            dsp.stft_power(dsp.AudioSegment(np.zeros(48000), 48000))


class TestMelFilterbank:
    def test_rows_are_single_peaked_triangles(self):
        fb = dsp.mel_filterbank()
        assert fb.shape == (256, 1025)
        assert np.all(fb >= 0)
        for i in range(256):
            row = fb[i]
            support = np.nonzero(row)[0]
            assert support.size > 0
            seg = row[support[0]:support[-1] + 1]
            p = int(np.argmax(seg))
            assert np.all(np.diff(seg[:p + 1]) >= 0)
            assert np.all(np.diff(seg[p:]) <= 0)

    def test_centers_strictly_increasing(self):
        centers = dsp.filter_centers()
        assert np.all(np.diff(centers) > 0)

    def test_supports_tile_without_gaps(self):
        # every fft bin below the last center is covered by some filter
        fb = dsp.mel_filterbank()
        centers = dsp.filter_centers()
        bin_freqs = np.linspace(0.0, 11025.0, 1025)
        covered = fb.sum(axis=0) > 0
        inside = (bin_freqs > centers[0]) & (bin_freqs < centers[-1])
        assert covered[inside].all()

    def test_pure_tone_lands_on_derived_band(self):
        centers = dsp.filter_centers()
        derived = int(np.argmin(np.abs(centers - 1000.0)))
        assert derived == 76  # frozen from the mel-scale formula
        seg = dsp.preprocess(sine(1000.0, 10.0, 48000), 48000)
        feats = dsp.log_mel(seg)
        band = int(np.argmax(feats.values.mean(axis=1)))
        assert abs(band - derived) <= 1

    def test_too_many_bands_rejected(self):
        with pytest.raises(ConfigError):
            dsp.mel_filterbank(n_mels=2000)


class TestLogMel:
    def test_zero_signal_hits_log_floor(self):
        seg = dsp.AudioSegment(np.zeros(220500), 22050)
        feats = dsp.log_mel(seg)
        np.testing.assert_allclose(feats.values, math.log(1e-10), atol=1e-12)

    def test_ten_second_48k_shape(self):
        feats = dsp.extract_features(sine(700.0, 10.0, 48000), 48000)
        assert feats.values.shape == (256, 512)

    def test_amplitude_doubling_adds_log4(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(220500) * 0.1
        seg1 = dsp.AudioSegment(x - x.mean(), 22050)
        seg2 = dsp.AudioSegment(2 * (x - x.mean()), 22050)
        f1 = dsp.log_mel(seg1).values
        f2 = dsp.log_mel(seg2).values
        above = f1 > math.log(1e-10) + 1e-6
        np.testing.assert_allclose((f2 - f1)[above], math.log(4.0), atol=1e-6)

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(48000)
        a = dsp.extract_features(x, 48000).values
        b = dsp.extract_features(x.copy(), 48000).values
        np.testing.assert_array_equal(a, b)

    def test_energy_monotone_in_amplitude(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(60000) * 0.01
        seg1 = dsp.AudioSegment(x - x.mean(), 22050)
        seg3 = dsp.AudioSegment(3.0 * (x - x.mean()), 22050)
        f1 = dsp.log_mel(seg1).values
        f3 = dsp.log_mel(seg3).values
        assert np.all(f3 >= f1 - 1e-12)

    def test_short_input_padded_with_floor(self):
        seg = dsp.AudioSegment(np.concatenate([sine(300.0, 2.0, 22050)]), 22050)
        feats = dsp.log_mel(seg)
        assert feats.values.shape == (256, 512)
        assert np.allclose(feats.values[:, -1], math.log(1e-10))


class TestFeatureCache:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        feats = dsp.LogMelFeatures(rng.standard_normal((256, 512)))
        p1 = tmp_path / "a.ascf"
        p2 = tmp_path / "b.ascf"
        dsp.write_feature_cache(p1, feats)
        loaded = dsp.read_feature_cache(p1)
        dsp.write_feature_cache(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        reloaded = dsp.read_feature_cache(p2)
        np.testing.assert_array_equal(loaded.values, reloaded.values)

    def test_header_fields(self, tmp_path):
        feats = dsp.LogMelFeatures(np.zeros((8, 16)))
        p = tmp_path / "c.ascf"
        dsp.write_feature_cache(p, feats)
        blob = p.read_bytes()
        assert blob[:4] == b"ASCF"
        assert blob[4] == 1
        assert int.from_bytes(blob[5:9], "little") == 8
        assert int.from_bytes(blob[9:13], "little") == 16
        assert len(blob) == 13 + 4 * 8 * 16

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ascf"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            dsp.read_feature_cache(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "d.ascf"
        dsp.write_feature_cache(p, dsp.LogMelFeatures(np.zeros((4, 4))))
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            dsp.read_feature_cache(p)
