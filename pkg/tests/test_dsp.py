import math

import numpy as np
import pytest

from stagemask import dsp

from reference import naive_dft


def _rand_waveform(rng, n, rate=16000):
    return dsp.Waveform(rng.standard_normal(n) * 0.1, rate)


class TestHannWindow:
    def test_endpoint_zero(self):
        win = dsp.hann_window(512)
        assert win.coefficients[0] == 0.0
        assert win.coefficients[-1] == 0.0

    def test_symmetry_exact(self):
        w = dsp.hann_window(512).coefficients
        assert np.array_equal(w, w[::-1])

    def test_small_window_value(self):
        # sin^2(pi/3) = 3/4 at t=1 for a 4-point window
        w = dsp.hann_window(4).coefficients
        assert w[1] == pytest.approx(0.75, abs=1e-15)

    def test_matches_formula(self):
        n = 33
        w = dsp.hann_window(n).coefficients
        expected = [math.sin(math.pi * t / (n - 1)) ** 2 for t in range(n)]
        np.testing.assert_allclose(w, expected, atol=1e-14)

    def test_default_hop_is_half(self):
        assert dsp.hann_window(512).hop == 256

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            dsp.hann_window(1)


class TestStft:
    def test_zero_input_zero_mag_zero_phase(self):
        x = dsp.Waveform(np.zeros(1024), 8000)
        mag, phase = dsp.stft(x, dsp.hann_window(128, 64))
        assert np.all(mag.values == 0.0)
        assert np.all(phase.values == 0.0)

    def test_bin_count(self):
        x = dsp.Waveform(np.zeros(2048), 16000)
        mag, _ = dsp.stft(x, dsp.hann_window(512, 256))
        assert mag.values.shape[0] == 257

    def test_cosine_peaks_at_its_bin(self):
        n, hop, k = 128, 64, 5
        t = np.arange(n * 6)
        x = dsp.Waveform(np.cos(2 * np.pi * k * t / n), 8000)
        mag, _ = dsp.stft(x, dsp.hann_window(n, hop))
        # frames fully inside the signal (last frame may cover padding)
        for tau in range(mag.values.shape[1] - 1):
            assert int(np.argmax(mag.values[:, tau])) == k

    def test_matches_direct_dft(self):
        rng = np.random.default_rng(3)
        n, hop = 16, 8
        x = _rand_waveform(rng, 40)
        win = dsp.hann_window(n, hop)
        mag, phase = dsp.stft(x, win)
        xp = np.zeros(dsp.padded_length(len(x), win))
        xp[: len(x)] = x.samples
        for tau in range(mag.values.shape[1]):
            frame = [
                win.coefficients[i] * xp[tau * hop + i] for i in range(n)
            ]
            spec = naive_dft(frame)
            for w in range(n // 2 + 1):
                assert abs(abs(spec[w]) - mag.values[w, tau]) < 1e-9

    def test_parseval_per_frame(self):
        rng = np.random.default_rng(4)
        n = 32
        x = _rand_waveform(rng, n)
        win = dsp.hann_window(n, n // 2)
        mag, _ = dsp.stft(x, win)
        windowed = win.coefficients * x.samples
        time_energy = float(np.sum(windowed ** 2))
        m = mag.values[:, 0]
        spec_energy = (m[0] ** 2 + m[-1] ** 2 + 2 * np.sum(m[1:-1] ** 2)) / n
        assert abs(spec_energy - time_energy) / time_energy < 1e-9

    def test_linear_in_amplitude(self):
        rng = np.random.default_rng(5)
        x = _rand_waveform(rng, 1000)
        win = dsp.hann_window(128, 64)
        mag1, ph1 = dsp.stft(x, win)
        mag2, ph2 = dsp.stft(dsp.Waveform(2.5 * x.samples, x.sample_rate), win)
        np.testing.assert_allclose(mag2.values, 2.5 * mag1.values, rtol=1e-12)
        nonzero = mag1.values > 1e-12
        np.testing.assert_allclose(
            ph2.values[nonzero], ph1.values[nonzero], atol=1e-9
        )

    def test_rectangular_window_dc_frame(self):
        n = 64
        win = dsp.AnalysisWindow(np.ones(n), n)
        x = dsp.Waveform(np.ones(n), 8000)
        mag, _ = dsp.stft(x, win)
        assert mag.values[0, 0] == pytest.approx(n, rel=1e-12)
        assert np.all(mag.values[1:, 0] < 1e-9)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            dsp.stft(dsp.Waveform(np.zeros(100), 8000), dsp.hann_window(128, 64))


class TestIstft:
    def test_round_trip_interior(self):
        rng = np.random.default_rng(6)
        win = dsp.hann_window(512, 256)
        for _ in range(3):
            n = int(rng.integers(4 * 512, 6 * 512))
            x = _rand_waveform(rng, n)
            mag, phase = dsp.stft(x, win)
            y = dsp.istft(mag, phase, win, len(x), x.sample_rate)
            interior = slice(512, n - 512)
            err = np.linalg.norm(y.samples[interior] - x.samples[interior])
            err /= np.linalg.norm(x.samples[interior])
            assert err < 1e-6

    def test_zero_magnitude_gives_zero(self):
        mag = dsp.Spectrogram(np.zeros((65, 10)), 64, 128)
        phase = dsp.PhaseMatrix(np.zeros((65, 10)))
        y = dsp.istft(mag, phase, dsp.hann_window(128, 64), 500, 8000)
        assert np.all(y.samples == 0.0)

    def test_linearity(self):
        rng = np.random.default_rng(7)
        x = _rand_waveform(rng, 2000, 8000)
        win = dsp.hann_window(128, 64)
        mag, phase = dsp.stft(x, win)
        y1 = dsp.istft(mag, phase, win, len(x), 8000)
        doubled = dsp.Spectrogram(2.0 * mag.values, 64, 128)
        y2 = dsp.istft(doubled, phase, win, len(x), 8000)
        np.testing.assert_allclose(y2.samples, 2.0 * y1.samples, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        mag = dsp.Spectrogram(np.zeros((65, 10)), 64, 128)
        phase = dsp.PhaseMatrix(np.zeros((65, 9)))
        with pytest.raises(ValueError):
            dsp.istft(mag, phase, dsp.hann_window(128, 64), 100, 8000)

    def test_beyond_span_rejected(self):
        mag = dsp.Spectrogram(np.zeros((65, 10)), 64, 128)
        phase = dsp.PhaseMatrix(np.zeros((65, 10)))
        span = 9 * 64 + 128
        with pytest.raises(dsp.CoverageError):
            dsp.istft(mag, phase, dsp.hann_window(128, 64), span + 1, 8000)


class TestTypes:
    def test_waveform_rejects_nan(self):
        with pytest.raises(ValueError):
            dsp.Waveform(np.array([0.0, np.nan]), 8000)

    def test_spectrogram_rejects_negative(self):
        with pytest.raises(ValueError):
            dsp.Spectrogram(-np.ones((65, 4)), 64, 128)

    def test_spectrogram_bin_count_checked(self):
        with pytest.raises(ValueError):
            dsp.Spectrogram(np.zeros((64, 4)), 64, 128)

    def test_window_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            dsp.AnalysisWindow(np.array([0.0, 0.5, 1.0, 0.2]), 2)

    def test_frame_count_formula(self):
        win = dsp.hann_window(512, 256)
        # (4000 - 512) / 256 = 13.625 -> padded to 14 hops + window
        assert dsp.frame_count(4000, win) == 15
        assert dsp.padded_length(4000, win) == 14 * 256 + 512
