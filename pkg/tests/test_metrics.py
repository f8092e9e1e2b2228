import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asyncdanse import dsp
from asyncdanse import metrics as M

FS = 16000
FLEN = 512  # 32 ms


def speechlike(rng, n=FS):
    return rng.standard_normal(n) * np.repeat(rng.uniform(0.2, 1.0, n // FLEN + 1), FLEN)[:n]


class TestSegmentalSnr:
    def test_identical_hits_ceiling(self):
        x = speechlike(np.random.default_rng(0))
        assert M.segmental_snr(x, x, FS) == M.SEG_CEIL_DB

    def test_equal_power_noise_is_zero_db(self):
        # per frame error energy equals reference energy
        rng = np.random.default_rng(1)
        x = speechlike(rng)
        frames = x[:x.size // FLEN * FLEN].reshape(-1, FLEN)
        noise = rng.standard_normal(frames.shape)
        noise *= np.sqrt((frames ** 2).sum(1) / (noise ** 2).sum(1))[:, None]
        est = frames.ravel() + noise.ravel()
        assert M.segmental_snr(est, frames.ravel(), FS) == pytest.approx(0.0, abs=1e-9)

    def test_white_noise_near_floor(self):
        rng = np.random.default_rng(2)
        x = speechlike(rng)
        assert M.segmental_snr(10 * rng.standard_normal(x.size), x, FS) < -9.0

    def test_silent_frames_excluded(self):
        rng = np.random.default_rng(3)
        x = speechlike(rng)
        x[:4 * FLEN] = 0
        est = x + 0.1 * rng.standard_normal(x.size)
        tail = M.segmental_snr(est[4 * FLEN:], x[4 * FLEN:], FS)
        assert M.segmental_snr(est, x, FS) == pytest.approx(tail)

    def test_skip_samples(self):
        rng = np.random.default_rng(4)
        x = speechlike(rng)
        est = x.copy()
        est[:FLEN] += 5 * rng.standard_normal(FLEN)
        assert M.segmental_snr(est, x, FS, skip_samples=FLEN) == M.SEG_CEIL_DB

    def test_errors(self):
        with pytest.raises(ValueError):
            M.segmental_snr(np.ones(10), np.ones(10), FS)
        with pytest.raises(ValueError):
            M.segmental_snr(np.ones(2048), np.zeros(2048), FS)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 10.0))
    def test_bounded(self, seed, scale):
        rng = np.random.default_rng(seed)
        x = speechlike(rng, 4096)
        v = M.segmental_snr(x + scale * rng.standard_normal(x.size), x, FS)
        assert M.SEG_FLOOR_DB <= v <= M.SEG_CEIL_DB


class TestOracleDistance:
    def test_identical_sentinel(self):
        x = np.random.default_rng(5).standard_normal(100)
        assert M.oracle_distance(x, x) <= -100

    def test_zero_output_is_zero_db(self):
        x = np.random.default_rng(6).standard_normal(100)
        assert M.oracle_distance(np.zeros(100), x) == pytest.approx(0.0)

    def test_silent_reference(self):
        assert np.isnan(M.oracle_distance(np.ones(10), np.zeros(10)))

    def test_window_and_scale(self):
        x = np.random.default_rng(7).standard_normal(200)
        y = x.copy()
        y[:100] = 0
        assert M.oracle_distance(y, x, 100, 200) <= -100
        assert M.oracle_distance(1.1 * x, x) == pytest.approx(-20.0)


class TestClocks:
    def test_to_reference_clock_inverts_skew(self):
        rng = np.random.default_rng(8)
        t = np.arange(FS) / FS
        x = np.sin(2 * np.pi * 440 * t) + 0.5 * np.sin(2 * np.pi * 1234 * t)
        skewed = dsp.TimeSignal(dsp.resample(x, 1 + 300e-6), FS * (1 + 300e-6), 1)
        back = M.to_reference_clock(skewed, 300.0)
        n = min(back.samples.size, x.size) - 200
        assert back.rate_hz == pytest.approx(FS)
        assert np.max(np.abs(back.samples[200:n] - x[200:n])) < 1e-3

    @pytest.mark.parametrize("d", [-2.3, -0.4, 0.0, 0.25, 1.7])
    def test_frame_delay_fractional(self, d):
        rng = np.random.default_rng(9)
        x = rng.standard_normal(4 * 1024)
        z = np.fft.rfft(x[1024:2048])
        nu = np.arange(z.size)
        delayed = z * np.exp(-2j * np.pi * nu * d / 1024)
        assert M.frame_delay(delayed, z, 1024) == pytest.approx(d, abs=2e-3)

    def test_residual_drift_of_exact_alignment(self):
        cfg = dsp.WolaConfig.sqrt_hann(1024)
        rng = np.random.default_rng(10)
        eps = 200e-6
        stream = rng.standard_normal(8 * 1024)
        ref = dsp.resample(stream[1023:], 1 / (1 + eps))
        recs = [(i, e, dsp.analysis_frame(ref[e - 1024:e], cfg)) for i, e in enumerate(range(2048, 6000, 512))]
        d = M.residual_drift(recs, stream, eps, cfg)
        assert d.size == len(recs)
        assert np.max(np.abs(d)) < 1e-3
