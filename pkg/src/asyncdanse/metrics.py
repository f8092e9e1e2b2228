"""Fidelity metrics for desired-signal estimates."""
from __future__ import annotations

import numpy as np

from . import dsp
from . import sro as SR

SEG_FLOOR_DB = -10.0
SEG_CEIL_DB = 35.0
SILENT_SENTINEL_DB = float("nan")
IDENTICAL_DB = -300.0


def _samples(x) -> np.ndarray:
    x = np.asarray(getattr(x, "samples", x), dtype=float)
    return x[0] if x.ndim > 1 else x


def segmental_snr(estimate, clean, fs: float = 16000.0, frame_ms: float = 32.0,
                  skip_samples: int = 0, voiced=None, voiced_rel: float = 1e-3) -> float:
    """Mean per-frame SNR of `estimate` against `clean`, each frame clamped to [-10, 35] dB.

    Frames start after `skip_samples`. Only voiced frames count: by default
    those whose clean energy exceeds `voiced_rel` times the largest clean
    frame energy. Zero-energy reference frames are always excluded.
    """
    d_hat, d = _samples(estimate), _samples(clean)
    n = min(d_hat.size, d.size)
    flen = int(round(frame_ms * 1e-3 * fs))
    n_frames = (n - skip_samples) // flen
    if n_frames <= 0:
        raise ValueError("signals are shorter than one metric frame")
    sl = slice(skip_samples, skip_samples + n_frames * flen)
    ref = d[sl].reshape(n_frames, flen)
    err = (d_hat[sl] - d[sl]).reshape(n_frames, flen)
    e_ref = np.sum(ref ** 2, axis=1)
    e_err = np.sum(err ** 2, axis=1)
    if voiced is None:
        voiced = e_ref > voiced_rel * e_ref.max() if e_ref.max() > 0 else np.zeros(n_frames, bool)
    voiced = np.asarray(voiced, dtype=bool) & (e_ref > 0)
    if not voiced.any():
        raise ValueError("no voiced frames in the reference")
    with np.errstate(divide="ignore"):
        snr = 10 * np.log10(e_ref[voiced] / e_err[voiced])
    return float(np.mean(np.clip(snr, SEG_FLOOR_DB, SEG_CEIL_DB)))


def oracle_distance(distributed, centralized, start: int = 0, stop: int | None = None) -> float:
    """10 log10 of the error energy relative to the centralised estimate energy.

    Identical signals give -300 dB; a silent centralised estimate gives NaN.
    """
    a, b = _samples(distributed), _samples(centralized)
    n = min(a.size, b.size)
    stop = n if stop is None else min(stop, n)
    a, b = a[start:stop], b[start:stop]
    ref = np.sum(b ** 2)
    if ref <= 0:
        return SILENT_SENTINEL_DB
    err = np.sum((a - b) ** 2)
    if err == 0:
        return IDENTICAL_DB
    return float(10 * np.log10(err / ref))


def to_reference_clock(sig: dsp.TimeSignal, sro_ppm: float) -> dsp.TimeSignal:
    """Resample a node-clock signal back onto the reference clock."""
    if sro_ppm == 0:
        return dsp.TimeSignal(sig.samples, sig.rate_hz, "reference")
    return dsp.TimeSignal(dsp.resample(sig.samples, 1.0 / (1.0 + sro_ppm * 1e-6)),
                          sig.rate_hz / (1.0 + sro_ppm * 1e-6), "reference")


def frame_delay(z_test, z_ref, N: int, max_lag: float = 4.0) -> float:
    """Fractional delay (samples) of `z_test` relative to `z_ref`, both one-sided frames.

    Peak of the phase-transform cross-correlation, refined by golden
    section search within half a sample of the best integer lag.
    """
    cross = np.asarray(z_test) * np.conj(z_ref)
    mag = np.abs(cross)
    cross = np.where(mag > 0, cross / np.where(mag > 0, mag, 1.0), 0.0)
    lags = np.arange(-int(max_lag), int(max_lag) + 1)
    best = lags[np.argmax([SR.gcc_value(cross, lag, N) for lag in lags])]
    return SR.golden_section_max(lambda lag: SR.gcc_value(cross, lag, N), best - 0.5, best + 0.5)


def residual_drift(compensated, fused_stream, eps_kq: float, cfg: dsp.WolaConfig,
                   first_frame: int = 0) -> np.ndarray:
    """Residual delay of compensated received frames against the true aligned signal.

    `compensated` holds (frame, window_end, z_check) records of one
    receiving node and peer; `fused_stream` is the peer's transmitted
    per-sample stream, which lags its content by N - 1 samples. The stream
    is moved to the receiver clock with the true offset `eps_kq` and framed
    over the same local window as the receiver's microphones.
    """
    N = cfg.N
    ref = dsp.resample(np.asarray(fused_stream)[N - 1:], 1.0 / (1.0 + eps_kq))
    out = []
    for i, end, z in compensated:
        if i < first_frame or end < N or end > ref.size:
            continue
        z_ref = dsp.analysis_frame(ref[end - N:end], cfg)
        out.append(frame_delay(z, z_ref, N))
    return np.asarray(out)
