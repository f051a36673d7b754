import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.signal import freqz

from mudaloc.errors import ValidationError
from mudaloc.filters import (
    ButterworthConfig,
    HampelConfig,
    WaveletConfig,
    butterworth_design,
    butterworth_lowpass,
    hampel_filter,
    qc_pipeline,
    wavedec,
    wavelet_filter,
    wavelet_shrink_value,
    waverec,
)
from tests.conftest import make_recording


def hampel_reference(x, config):
    """Literal definition, one window at a time."""
    n = x.size
    half = config.window // 2
    out = x.copy()
    mask = np.zeros(n, dtype=bool)
    for i in range(n):
        win = x[max(0, i - half) : min(n, i + half + 1)]
        med = np.median(win)
        mad = np.median(np.abs(win - med))
        if abs(x[i] - med) > config.n_sigmas * config.mad_scale * mad:
            out[i] = med
            mask[i] = True
    return out, mask


class TestHampel:
    def test_single_spike_replaced_by_local_median(self):
        x = np.ones(11)
        x[5] = 50.0
        out, mask = hampel_filter(x, HampelConfig(window=5))
        np.testing.assert_array_equal(out, np.ones(11))
        assert mask.nonzero()[0].tolist() == [5]

    def test_matches_reference_on_random_series(self, rng):
        config = HampelConfig(window=9, n_sigmas=3.0)
        for _ in range(50):
            x = rng.normal(size=rng.integers(9, 80))
            spikes = rng.random(x.size) < 0.05
            x[spikes] += rng.choice([-8.0, 8.0], size=int(spikes.sum()))
            got, got_mask = hampel_filter(x, config)
            want, want_mask = hampel_reference(x, config)
            np.testing.assert_array_equal(got, want)
            np.testing.assert_array_equal(got_mask, want_mask)

    def test_input_not_mutated(self, rng):
        x = rng.normal(size=20)
        x[3] = 100.0
        before = x.copy()
        hampel_filter(x, HampelConfig(window=5))
        np.testing.assert_array_equal(x, before)

    def test_window_longer_than_series_rejected(self):
        with pytest.raises(ValidationError):
            hampel_filter(np.zeros(4), HampelConfig(window=5))

    @pytest.mark.parametrize("window", [2, 4, 1])
    def test_even_or_tiny_window_rejected(self, window):
        with pytest.raises(ValidationError):
            HampelConfig(window=window)


class TestWaveletShrink:
    def test_frozen_hand_value(self):
        # 10 - 2*1 / (exp((10-1)/1) + 1)
        assert wavelet_shrink_value(10.0, 1.0) == pytest.approx(
            9.999753210848027, abs=1e-12
        )

    def test_below_threshold_zeroed(self):
        assert wavelet_shrink_value(0.5, 1.0) == 0.0
        assert wavelet_shrink_value(-0.99, 1.0) == 0.0

    def test_zero_threshold_is_identity(self, rng):
        x = rng.normal(size=16)
        np.testing.assert_array_equal(wavelet_shrink_value(x, 0.0), x)

    def test_continuous_at_threshold(self):
        t = 1.3
        eps = 1e-9
        below = wavelet_shrink_value(t - eps, t)
        above = wavelet_shrink_value(t + eps, t)
        assert below == 0.0
        assert abs(above) < 1e-8

    @given(
        x=st.floats(-1e6, 1e6, allow_nan=False),
        t=st.floats(1e-6, 1e3, allow_nan=False),
    )
    def test_odd_and_bounded(self, x, t):
        f = wavelet_shrink_value(x, t)
        assert f == -wavelet_shrink_value(-x, t)
        assert abs(f - x) <= 2.0 * t + 1e-12

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValidationError):
            wavelet_shrink_value(1.0, -0.1)


class TestWaveletTransform:
    @pytest.mark.parametrize("n", [16, 64, 37, 51])
    def test_roundtrip_exact(self, rng, n):
        x = rng.normal(size=n)
        coeffs, lengths = wavedec(x, levels=3)
        np.testing.assert_allclose(waverec(coeffs, lengths), x, atol=1e-12)

    def test_orthonormal_energy_preserved(self, rng):
        x = rng.normal(size=64)
        coeffs, _ = wavedec(x, levels=3)
        energy = sum(float(np.sum(c**2)) for c in coeffs)
        assert energy == pytest.approx(float(np.sum(x**2)), rel=1e-10)

    def test_filter_keeps_constant_series(self):
        x = np.full(32, 2.5)
        np.testing.assert_allclose(wavelet_filter(x), x, atol=1e-12)

    def test_filter_reduces_noise(self, rng):
        t = np.linspace(0, 2 * np.pi, 128)
        clean = np.sin(t)
        noisy = clean + rng.normal(scale=0.3, size=t.size)
        filtered = wavelet_filter(noisy)
        assert np.mean((filtered - clean) ** 2) < np.mean((noisy - clean) ** 2)

    def test_fixed_threshold_rule(self, rng):
        x = rng.normal(size=32)
        cfg = WaveletConfig(threshold_rule="fixed", threshold=1e9)
        filtered = wavelet_filter(x, cfg)
        # details annihilated, approximation band survives
        coeffs, lengths = wavedec(x, cfg.levels)
        approx_only = [coeffs[0]] + [np.zeros_like(c) for c in coeffs[1:]]
        np.testing.assert_allclose(filtered, waverec(approx_only, lengths), atol=1e-12)

    def test_too_short_series_rejected(self):
        with pytest.raises(ValidationError):
            wavelet_filter(np.zeros(7), WaveletConfig(levels=3))

    def test_fixed_rule_needs_threshold(self):
        with pytest.raises(ValidationError):
            WaveletConfig(threshold_rule="fixed")


class TestButterworth:
    def test_gain_at_cutoff_is_half_power(self):
        cfg = ButterworthConfig(order=4, cutoff_hz=10.0, fs_hz=100.0)
        b, a = butterworth_design(cfg)
        w, h = freqz(b, a, worN=[cfg.cutoff_hz], fs=cfg.fs_hz)
        assert 20 * np.log10(abs(h[0])) == pytest.approx(-3.0103, abs=0.1)

    def test_stopband_attenuation(self):
        cfg = ButterworthConfig(order=4, cutoff_hz=10.0, fs_hz=100.0)
        b, a = butterworth_design(cfg)
        w, h = freqz(b, a, worN=[4.5 * cfg.cutoff_hz], fs=cfg.fs_hz)
        assert 20 * np.log10(abs(h[0])) <= -40.0

    def test_constant_series_passes_exactly(self):
        x = np.full(50, 3.7)
        np.testing.assert_allclose(butterworth_lowpass(x), x, rtol=1e-9)

    def test_high_frequency_suppressed_low_preserved(self):
        t = np.arange(400)
        rms = lambda s: float(np.sqrt(np.mean(s**2)))
        high = np.sin(2 * np.pi * 45.0 * t / 100.0)
        low = np.sin(2 * np.pi * 2.0 * t / 100.0)
        # steady-state tails; the causal filter delays but must not distort
        assert rms(butterworth_lowpass(high)[100:]) < 0.01 * rms(high[100:])
        assert rms(butterworth_lowpass(low)[100:]) == pytest.approx(
            rms(low[100:]), rel=0.01
        )

    def test_cutoff_must_be_below_nyquist(self):
        with pytest.raises(ValidationError):
            ButterworthConfig(cutoff_hz=50.0, fs_hz=100.0)


class TestQcPipeline:
    def test_output_contracts(self, rng):
        rec = make_recording(rng, v=40, m=2, n=3)
        out = qc_pipeline(rec, hampel=HampelConfig(window=11))
        assert out.amp.shape == rec.amp.shape
        assert np.all(out.amp >= 0)
        np.testing.assert_array_equal(out.phase, rec.phase)
        assert (out.rp_id, out.pos, out.domain_id) == (rec.rp_id, rec.pos, rec.domain_id)

    def test_spike_removed(self, rng):
        amp = np.ones((40, 1, 2))
        amp[17, 0, 0] = 25.0
        rec = make_recording(rng, v=40, m=1, n=2)
        rec = type(rec)(rp_id=0, pos=(0, 0), domain_id="d", amp=amp, phase=rec.phase[:, :1, :2])
        out = qc_pipeline(rec, hampel=HampelConfig(window=11))
        np.testing.assert_allclose(out.amp, 1.0, atol=1e-6)

    def test_too_few_packets_rejected(self, rng):
        rec = make_recording(rng, v=10)
        with pytest.raises(ValidationError):
            qc_pipeline(rec, hampel=HampelConfig(window=11))
