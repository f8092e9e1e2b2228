"""Windowing, DFT, WOLA analysis/synthesis, convolution and resampling.

DFT convention used throughout the package: the forward transform is
unnormalized and the inverse carries the 1/N factor (numpy's default).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import signal as sps
from scipy import special


class InvalidConfigError(ValueError):
    pass


class UnderflowError(ValueError):
    """Raised when a stream holds fewer samples than a frame needs."""


def make_sqrt_hann(N: int) -> np.ndarray:
    """Square root of the periodic Hann window of length `N`.

    With 50% overlap the squared window sums to one, so the same window
    serves for analysis and synthesis.
    """
    if int(N) != N or N < 4 or N % 2:
        raise InvalidConfigError(f"window length must be an even integer >= 4, got {N}")
    n = np.arange(N)
    return np.sqrt(0.5 * (1.0 - np.cos(2.0 * np.pi * n / N)))


@dataclass(frozen=True)
class WolaConfig:
    N: int
    Ns: int
    analysis_window: np.ndarray = field(repr=False)
    synthesis_window: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.N % 2 or self.N < 4:
            raise InvalidConfigError(f"N must be even and >= 4, got {self.N}")
        if self.Ns != self.N // 2:
            raise InvalidConfigError("only 50% overlap (Ns = N/2) is supported")
        ha = np.asarray(self.analysis_window, dtype=float)
        hs = np.asarray(self.synthesis_window, dtype=float)
        if ha.shape != (self.N,) or hs.shape != (self.N,):
            raise InvalidConfigError("windows must have length N")
        cola = ha[: self.Ns] * hs[: self.Ns] + ha[self.Ns:] * hs[self.Ns:]
        if np.max(np.abs(cola - 1.0)) > 1e-12:
            raise InvalidConfigError("analysis/synthesis windows violate the COLA identity")
        ha.flags.writeable = False
        hs.flags.writeable = False
        object.__setattr__(self, "analysis_window", ha)
        object.__setattr__(self, "synthesis_window", hs)

    @classmethod
    def sqrt_hann(cls, N: int = 1024) -> "WolaConfig":
        win = make_sqrt_hann(N)
        return cls(N=N, Ns=N // 2, analysis_window=win, synthesis_window=win.copy())

    @property
    def n_bins(self) -> int:
        """Number of non-negative frequency bins of a real frame."""
        return self.N // 2 + 1


def dft(frame) -> np.ndarray:
    return np.fft.fft(np.asarray(frame))


def idft(spectrum) -> np.ndarray:
    return np.fft.ifft(np.asarray(spectrum))


def _check_length(x: np.ndarray, N: int):
    if x.shape[-1] != N:
        raise ValueError(f"expected {N} samples, got {x.shape[-1]}")


def wola_analysis(stream, cfg: WolaConfig, i: int) -> np.ndarray:
    """Full N-bin spectrum of frame `i`, which covers samples [i*Ns, i*Ns + N)."""
    x = np.asarray(stream, dtype=float)
    start = i * cfg.Ns
    if i < 0 or x.shape[-1] < start + cfg.N:
        raise UnderflowError(
            f"frame {i} needs {start + cfg.N} samples, stream has {x.shape[-1]}"
        )
    return dft(cfg.analysis_window * x[..., start:start + cfg.N])


def analysis_frame(segment, cfg: WolaConfig) -> np.ndarray:
    """One-sided (rfft) spectrum of an N-sample segment; last axis is time."""
    seg = np.asarray(segment, dtype=float)
    _check_length(seg, cfg.N)
    return np.fft.rfft(cfg.analysis_window * seg, axis=-1)


def synthesis_frame(spectrum, cfg: WolaConfig) -> np.ndarray:
    """Windowed inverse of a one-sided spectrum, ready for overlap-add."""
    return cfg.synthesis_window * np.fft.irfft(spectrum, n=cfg.N, axis=-1)


def wola_synthesis(frames: Iterable, cfg: WolaConfig) -> np.ndarray:
    """Overlap-add a sequence of full N-bin frames with hop Ns.

    Frame ``j`` lands on output samples [j*Ns, j*Ns + N), which makes this
    the exact inverse of :func:`wola_analysis` on samples covered by two
    frames.
    """
    frames = [np.asarray(f) for f in frames]
    if not frames:
        return np.zeros(0)
    out = np.zeros((len(frames) - 1) * cfg.Ns + cfg.N)
    for j, spec in enumerate(frames):
        _check_length(spec, cfg.N)
        seg = np.real(idft(spec))
        out[j * cfg.Ns:j * cfg.Ns + cfg.N] += cfg.synthesis_window * seg
    return out


def stft(x, cfg: WolaConfig) -> np.ndarray:
    """One-sided STFT with the streaming framing convention.

    The signal is front-padded with N - Ns zeros so frame ``i`` ends at
    sample (i + 1) * Ns; returns an array of shape (..., frames, N/2 + 1).
    """
    x = np.asarray(x, dtype=float)
    pad = cfg.N - cfg.Ns
    n_frames = -(-x.shape[-1] // cfg.Ns) + 1
    total = pad + n_frames * cfg.Ns
    xp = np.zeros(x.shape[:-1] + (total,))
    xp[..., pad:pad + x.shape[-1]] = x
    idx = np.arange(n_frames)[:, None] * cfg.Ns + np.arange(cfg.N)[None, :]
    return np.fft.rfft(cfg.analysis_window * xp[..., idx], axis=-1)


def istft(frames, cfg: WolaConfig, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft` (drops the front padding)."""
    frames = np.asarray(frames)
    n_frames = frames.shape[-2]
    segs = synthesis_frame(frames, cfg)
    out = np.zeros(frames.shape[:-2] + ((n_frames - 1) * cfg.Ns + cfg.N,))
    for j in range(n_frames):
        out[..., j * cfg.Ns:j * cfg.Ns + cfg.N] += segs[..., j, :]
    out = out[..., cfg.N - cfg.Ns:]
    if length is not None:
        out = out[..., :length]
    return out


@dataclass
class TimeSignal:
    """Uniformly sampled real signal; `samples` is (channels, time) or (time,)."""

    samples: np.ndarray
    rate_hz: float
    clock_owner: int | str = "reference"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("signal contains non-finite samples")

    def __len__(self):
        return self.samples.shape[-1]

    @property
    def duration(self) -> float:
        return len(self) / self.rate_hz

    def resampled(self, ratio: float, clock_owner=None) -> "TimeSignal":
        """The same signal seen by a clock running `ratio` times faster."""
        owner = self.clock_owner if clock_owner is None else clock_owner
        return TimeSignal(resample(self.samples, ratio), self.rate_hz * ratio, owner)


class OverlapAdd:
    """Streaming WOLA synthesis: each pushed frame yields Ns finished samples."""

    def __init__(self, cfg: WolaConfig):
        self.cfg = cfg
        self._tail = np.zeros(cfg.N - cfg.Ns)

    def push(self, spectrum) -> np.ndarray:
        seg = synthesis_frame(spectrum, self.cfg)
        seg[: self._tail.size] += self._tail
        self._tail = seg[self.cfg.Ns:].copy()
        return seg[: self.cfg.Ns]


def convolve(a, b) -> np.ndarray:
    """Full linear convolution."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("convolve needs nonempty inputs")
    if a.size * b.size <= 1 << 20:
        return np.convolve(a, b)
    return sps.fftconvolve(a, b)


RESAMPLE_HALF_TAPS = 64
RESAMPLE_BETA = 14.0
MAX_RESAMPLE_DEVIATION = 1e-3


_KAISER_STEP = 1.0 / 4096
_kaiser_table = None


def _kaiser(d: np.ndarray) -> np.ndarray:
    """Kaiser window of half-width RESAMPLE_HALF_TAPS + 1, linearly interpolated from a fine table."""
    global _kaiser_table
    width = RESAMPLE_HALF_TAPS + 1
    if _kaiser_table is None:
        u = np.arange(0.0, width + 2 * _KAISER_STEP, _KAISER_STEP)
        arg = np.clip(1.0 - (u / width) ** 2, 0.0, None)
        _kaiser_table = special.i0(RESAMPLE_BETA * np.sqrt(arg)) / special.i0(RESAMPLE_BETA)
    pos = np.minimum(np.abs(d), width) / _KAISER_STEP
    i = pos.astype(np.int64)
    f = pos - i
    return _kaiser_table[i] * (1.0 - f) + _kaiser_table[i + 1] * f


def _resample_kernel(d: np.ndarray, cutoff: float) -> np.ndarray:
    return cutoff * np.sinc(cutoff * d) * _kaiser(d)


def resample(x, ratio: float, *, chunk: int = 16384) -> np.ndarray:
    """Band-limited resampling by `ratio` (output rate / input rate).

    Output sample n is the Kaiser-windowed sinc interpolation of the input
    at position n / ratio; the output has floor(len(x) * ratio) samples.
    Works along the last axis.
    """
    if not np.isfinite(ratio) or abs(ratio - 1.0) > MAX_RESAMPLE_DEVIATION:
        raise ValueError(f"resampling ratio {ratio} outside 1 +/- {MAX_RESAMPLE_DEVIATION}")
    x = np.asarray(x, dtype=float)
    L = x.shape[-1]
    n_out = int(np.floor(L * ratio))
    if ratio == 1.0:
        return x[..., :n_out].copy()
    cutoff = min(1.0, ratio)
    H = RESAMPLE_HALF_TAPS
    xp = np.zeros(x.shape[:-1] + (L + 2 * H + 2,))
    xp[..., H:H + L] = x
    offsets = np.arange(-H, H + 1)
    out = np.empty(x.shape[:-1] + (n_out,))
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(start + chunk, n_out))
        pos = n / ratio
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        idx = base[:, None] + offsets[None, :]
        kern = _resample_kernel(frac[:, None] - offsets[None, :], cutoff)
        valid = (idx >= -H) & (idx < L + H)
        taps = np.where(valid, idx + H, 0)
        out[..., start:start + n.size] = np.einsum("...nt,nt->...n", xp[..., taps], kern * valid)
    return out
