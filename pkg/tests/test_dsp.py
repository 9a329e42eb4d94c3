"""Signal-path tests: window COLA, STFT/ISTFT round trips, features, decimation."""

import numpy as np
import pytest

from danet.dsp import (
    ComplexSpectrogram,
    StftConfig,
    Waveform,
    decimate2,
    decimation_taps,
    feature_stats,
    istft,
    log_features,
    magnitude,
    make_sqrt_hann,
    phase,
    quantize_pcm16,
    read_wav,
    stft,
    write_wav,
)


def am_tone(n_samples, rate=8000, carrier=440.0, mod=3.0):
    """Speech-like amplitude-modulated tone."""
    t = np.arange(n_samples) / rate
    return (0.5 + 0.5 * np.sin(2 * np.pi * mod * t)) * np.sin(2 * np.pi * carrier * t)


def reference_istft(spec, cfg):
    """Naive sample-by-sample overlap-add inverse, independent of istft()."""
    window = make_sqrt_hann(cfg.win_len)
    pad_front = cfg.win_len - cfg.hop
    n_frames = spec.num_frames
    padded_len = (n_frames - 1) * cfg.hop + cfg.win_len
    acc = np.zeros(padded_len)
    norm = np.zeros(padded_len)
    for k in range(n_frames):
        frame = np.fft.irfft(spec.bins[:, k], n=cfg.fft_size)[:cfg.win_len]
        for n in range(cfg.win_len):
            acc[k * cfg.hop + n] += frame[n] * window[n]
            norm[k * cfg.hop + n] += window[n] ** 2
    out = np.where(norm > 1e-12, acc / np.maximum(norm, 1e-12), 0.0)
    return out[pad_front:pad_front + spec.source_len]


class TestSqrtHann:
    def test_win4_closed_form(self):
        w = make_sqrt_hann(4)
        assert np.allclose(w, [0.0, np.sqrt(0.5), 1.0, np.sqrt(0.5)], atol=1e-15)

    @pytest.mark.parametrize("win_len", [4, 8, 64, 256])
    def test_first_sample_zero(self, win_len):
        assert make_sqrt_hann(win_len)[0] == 0.0

    def test_cola_default_geometry(self):
        # Direct summation oracle: sum of squared window over all hop shifts
        # must be the same at every sample position.
        win_len, hop = 256, 64
        w2 = make_sqrt_hann(win_len) ** 2
        cover = np.zeros(win_len + 8 * hop)
        for k in range(0, cover.size - win_len + 1, hop):
            cover[k:k + win_len] += w2
        interior = cover[win_len - hop:cover.size - win_len]
        assert interior.max() - interior.min() < 1e-12

    @pytest.mark.parametrize("bad", [3, 7, 1, 0, -2])
    def test_rejects_odd_or_small(self, bad):
        with pytest.raises(ValueError):
            make_sqrt_hann(bad)


class TestStft:
    def test_zero_input_gives_zero_spectrogram(self):
        spec = stft(Waveform(np.zeros(1000), 8000))
        assert np.all(spec.bins == 0)

    def test_empty_waveform_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            stft(Waveform(np.zeros(0), 8000))

    def test_shape_contract(self):
        cfg = StftConfig()
        spec = stft(Waveform(np.random.default_rng(0).normal(size=777), 8000), cfg)
        assert spec.num_freqs == cfg.fft_size // 2 + 1 == 129
        assert spec.num_frames == cfg.num_frames(777)
        assert spec.source_len == 777

    def test_linearity(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=4000)
        b = rng.normal(size=4000)
        sa = stft(Waveform(a, 8000)).bins
        sb = stft(Waveform(b, 8000)).bins
        sab = stft(Waveform(a + b, 8000)).bins
        assert np.linalg.norm(sab - (sa + sb)) <= 1e-10 * np.linalg.norm(sab)

    def test_sine_energy_concentrates_at_its_bin(self):
        # Dense DFT oracle on one windowed frame, plus the concentration claim.
        cfg = StftConfig()
        k = 20
        freq = k * 8000 / cfg.fft_size
        t = np.arange(8000) / 8000
        spec = stft(Waveform(np.sin(2 * np.pi * freq * t), 8000), cfg)

        frame_idx = spec.num_frames // 2
        window = make_sqrt_hann(cfg.win_len)
        start = frame_idx * cfg.hop - (cfg.win_len - cfg.hop)
        segment = np.sin(2 * np.pi * freq * (np.arange(start, start + cfg.win_len) / 8000))
        dense = np.fft.fft(segment * window, n=cfg.fft_size)[:cfg.num_freqs]
        assert np.allclose(spec.bins[:, frame_idx], dense, atol=1e-10)

        # sqrt-Hann spreads a pure tone over a half-bin-wide mainlobe: the
        # peak sits at bin k and >= 99% of frame energy falls in k-1..k+1.
        interior = spec.bins[:, 4:-4]
        energy = np.abs(interior) ** 2
        assert np.all(np.argmax(energy, axis=0) == k)
        neighborhood = energy[k - 1:k + 2].sum(axis=0)
        assert np.all(neighborhood >= 0.99 * energy.sum(axis=0))

    def test_parseval_per_frame(self):
        # Frame energy of the windowed segment vs (1/fft_size) * sum |DFT|^2,
        # counting negative frequencies explicitly via a full FFT.
        cfg = StftConfig()
        rng = np.random.default_rng(7)
        x = rng.normal(size=2048)
        window = make_sqrt_hann(cfg.win_len)
        pad_front = cfg.win_len - cfg.hop
        padded = np.zeros((cfg.num_frames(x.size) - 1) * cfg.hop + cfg.win_len)
        padded[pad_front:pad_front + x.size] = x
        for k in range(cfg.num_frames(x.size)):
            seg = padded[k * cfg.hop:k * cfg.hop + cfg.win_len] * window
            lhs = np.sum(seg ** 2)
            rhs = np.sum(np.abs(np.fft.fft(seg, n=cfg.fft_size)) ** 2) / cfg.fft_size
            assert abs(lhs - rhs) <= 1e-9 * max(lhs, 1e-12)


class TestIstft:
    def test_round_trip_white_noise(self):
        x = np.random.default_rng(2).normal(size=8000)
        wave = Waveform(x, 8000)
        back = istft(stft(wave))
        assert np.linalg.norm(back.samples - x) < 1e-6 * np.linalg.norm(x)

    def test_zero_spectrogram_gives_zero_waveform(self):
        spec = stft(Waveform(np.ones(500), 8000))
        zero = ComplexSpectrogram(np.zeros_like(spec.bins), spec.source_len, spec.cfg)
        assert np.all(istft(zero).samples == 0)

    def test_round_trip_am_tone_odd_length(self):
        n = 6001  # not a hop multiple
        x = am_tone(n)
        spec = stft(Waveform(x, 8000))
        back = istft(spec)
        assert back.samples.size == n
        assert np.linalg.norm(back.samples - x) < 1e-6 * np.linalg.norm(x)
        assert np.allclose(back.samples, reference_istft(spec, spec.cfg), atol=1e-10)

    def test_round_trip_many_lengths(self):
        rng = np.random.default_rng(3)
        for n in [1, 63, 64, 65, 255, 256, 257, 1000, 4097]:
            x = rng.normal(size=n)
            back = istft(stft(Waveform(x, 8000)))
            assert back.samples.size == n
            assert np.linalg.norm(back.samples - x) <= 1e-6 * max(np.linalg.norm(x), 1e-12)

    def test_geometry_mismatch_rejected(self):
        spec = stft(Waveform(np.ones(500), 8000), StftConfig())
        with pytest.raises(ValueError, match="geometry"):
            istft(spec, StftConfig(win_len=128, hop=32, fft_size=128))


class TestMagnitudePhase:
    def test_three_four_five(self):
        cfg = StftConfig(win_len=2, hop=1, fft_size=2)
        bins = np.array([[3 + 4j], [0j]])
        spec = ComplexSpectrogram(bins, 1, cfg)
        assert magnitude(spec)[0, 0] == pytest.approx(5.0)
        assert phase(spec)[0, 0] == pytest.approx(np.arctan2(4, 3))

    def test_zero_entry_convention(self):
        cfg = StftConfig(win_len=2, hop=1, fft_size=2)
        spec = ComplexSpectrogram(np.zeros((2, 3), dtype=complex), 3, cfg)
        assert np.all(magnitude(spec) == 0)
        assert np.all(phase(spec) == 0)

    def test_polar_recomposition(self):
        rng = np.random.default_rng(4)
        spec = stft(Waveform(rng.normal(size=3000), 8000))
        recomposed = magnitude(spec) * np.exp(1j * phase(spec))
        assert np.max(np.abs(recomposed - spec.bins)) < 1e-12


class TestLogFeatures:
    def test_zero_magnitude_hits_floor(self):
        feats = log_features(np.zeros((4, 3)), floor_eps=1e-7)
        assert np.allclose(feats, np.log(1e-7))

    def test_unit_magnitude_is_zero(self):
        assert np.all(log_features(np.ones((4, 3))) == 0)

    def test_floor_lower_bounds_everything(self):
        rng = np.random.default_rng(5)
        mag = rng.uniform(0, 2, size=(6, 50))
        assert np.all(log_features(mag) >= np.log(1e-7) - 1e-15)

    def test_standardized_rows(self):
        rng = np.random.default_rng(6)
        mag = rng.uniform(0.1, 3.0, size=(5, 400))
        raw = log_features(mag)
        mean, std = feature_stats([raw])
        standardized = log_features(mag, mean=mean, std=std)
        assert np.allclose(standardized.mean(axis=1), 0, atol=1e-9)
        assert np.allclose(standardized.var(axis=1), 1, atol=1e-9)

    def test_rejects_bad_floor(self):
        with pytest.raises(ValueError, match="floor_eps"):
            log_features(np.ones((2, 2)), floor_eps=0.0)


class TestDecimate2:
    def tone(self, freq, n=16000, rate=16000):
        return Waveform(0.5 * np.sin(2 * np.pi * freq * np.arange(n) / rate), rate)

    def tap_response(self, freq):
        # Filter-response oracle: direct DTFT evaluation of the designed taps.
        taps = decimation_taps()
        n = np.arange(taps.size)
        return abs(np.sum(taps * np.exp(-2j * np.pi * freq * n / 16000)))

    def test_wrong_rate_rejected(self):
        with pytest.raises(ValueError, match="16000"):
            decimate2(Waveform(np.zeros(100), 8000))

    def test_dc_gain(self):
        out = decimate2(Waveform(np.full(8000, 0.25), 16000))
        assert out.sample_rate == 8000
        mid = out.samples[500:-500]
        ripple_db = 20 * np.log10(np.max(np.abs(mid)) / 0.25)
        assert abs(ripple_db) < 0.1

    def test_5khz_tone_attenuated(self):
        assert 20 * np.log10(self.tap_response(5000.0)) <= -60.0
        out = decimate2(self.tone(5000.0)).samples[500:-500]
        atten_db = 20 * np.log10(np.max(np.abs(out)) / 0.5)
        assert atten_db <= -60.0

    def test_1khz_tone_preserved(self):
        pred = self.tap_response(1000.0)
        assert abs(20 * np.log10(pred)) < 0.05
        out = decimate2(self.tone(1000.0)).samples[500:-500]
        gain_db = 20 * np.log10(np.max(np.abs(out)) / 0.5)
        assert abs(gain_db) < 0.1

    def test_delay_compensated(self):
        # After group-delay compensation a passband tone lines up in phase.
        wave = self.tone(1000.0)
        out = decimate2(wave)
        expected = wave.samples[::2]
        err = np.linalg.norm(out.samples[500:-500] - expected[500:-500])
        assert err < 0.02 * np.linalg.norm(expected[500:-500])


class TestWavIO:
    def test_round_trip(self, tmp_path):
        x = np.clip(np.random.default_rng(8).normal(scale=0.2, size=4000), -0.99, 0.99)
        path = tmp_path / "sig.wav"
        write_wav(path, Waveform(x, 8000))
        back = read_wav(path)
        assert back.sample_rate == 8000
        assert np.max(np.abs(back.samples - x)) <= 1.0 / 32768.0

    def test_quantization_is_exact_on_grid(self, tmp_path):
        ints = np.array([-32768, -1, 0, 1, 32767], dtype=np.int16)
        x = ints.astype(np.float64) / 32768.0
        assert np.array_equal(quantize_pcm16(x), ints)

    def test_rejects_stereo(self, tmp_path):
        import wave as wavefile

        path = tmp_path / "stereo.wav"
        with wavefile.open(str(path), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(8000)
            fh.writeframes(b"\x00\x00" * 64)
        with pytest.raises(ValueError, match="mono"):
            read_wav(path)
