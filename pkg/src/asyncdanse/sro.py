"""Blind SRO estimation by coherence drift, FSD bookkeeping and compensation.

Spectra here are one-sided (rfft layout, bins 0..N/2); the implied
negative-frequency half is the Hermitian mirror, so inverse transforms use
``irfft`` and fractional-lag evaluation uses signed frequencies.

Sign convention: for eps = f_q / f_k - 1 > 0, node q runs fast and its
fused signal lags the local one by eps samples per local sample.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

DEFAULT_LD = 10
DEFAULT_ALPHA = 0.95
DEFAULT_SEARCH_PPM = 1000.0
MAX_ABS_EPS = 1e-3
GOLDEN_TOL = 1e-3
GOLDEN_MAXITER = 30
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


DRIFT_MODELS = ("anchored", "centre", "cumulative")


class ClockModelError(RuntimeError):
    """More than one full-sample drift between two consecutive frames."""


def _bins(n_bins: int) -> np.ndarray:
    return np.arange(n_bins)


def instantaneous_coherence(y1, zq) -> np.ndarray:
    """Unit-modulus coherence y1 z* / |y1 z|; zero where either bin is silent."""
    y1 = np.asarray(y1)
    zq = np.asarray(zq)
    if y1.shape != zq.shape:
        raise ValueError("coherence inputs must have the same number of bins")
    cross = y1 * np.conj(zq)
    mag = np.sqrt(np.abs(y1) ** 2 * np.abs(zq) ** 2)
    out = np.zeros_like(cross)
    nz = mag > 0
    out[nz] = cross[nz] / mag[nz]
    return out


def coherence_product(gamma_now, gamma_lagged, phi_ac=1.0) -> np.ndarray:
    return np.asarray(gamma_now) * np.conj(gamma_lagged) * phi_ac


def update_avg_product(p_bar, p, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    return alpha * np.asarray(p_bar) + (1.0 - alpha) * np.asarray(p)


def fsd_phase(shift, n_bins: int, N: int) -> np.ndarray:
    """Corrective factor for `shift` net surplus samples at the peer.

    One surplus sample gives exp(-j 2 pi nu / N), one missing sample
    exp(+j 2 pi nu / N); products of factors add their shifts.
    """
    return np.exp(-2j * np.pi * _bins(n_bins) * shift / N)


def detect_fsd(rx_count_delta: int, Ns: int, N: int) -> tuple[int, np.ndarray]:
    """Compare samples received since the last frame with the local hop."""
    event = int(rx_count_delta) - Ns
    if abs(event) > 1:
        raise ClockModelError(f"{event:+d} samples drift within one frame")
    return event, fsd_phase(event, N // 2 + 1, N)


def compensate(zq, tau_hat: float, fsd_factor=1.0, N: int | None = None) -> np.ndarray:
    """Phase-shift a one-sided frame by the estimated drift `tau_hat` (samples)."""
    zq = np.asarray(zq)
    if N is None:
        N = 2 * (zq.shape[-1] - 1)
    return zq * np.exp(2j * np.pi * _bins(zq.shape[-1]) * tau_hat / N) * fsd_factor


def gcc_value(p_bar, lag: float, N: int) -> float:
    """|p(lag)| of the inverse DFT of a Hermitian cross-spectrum at a real lag."""
    p_bar = np.asarray(p_bar)
    nu = _bins(p_bar.size)
    weights = np.full(p_bar.size, 2.0)
    weights[0] = 1.0
    if N % 2 == 0:
        weights[-1] = 1.0
    val = np.sum(weights * np.real(p_bar * np.exp(2j * np.pi * nu * lag / N))) / N
    return abs(val)


def golden_section_max(f, lo: float, hi: float, tol: float = GOLDEN_TOL,
                       maxiter: int = GOLDEN_MAXITER) -> float:
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxiter):
        if b - a <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def estimate_sro(p_bar, ld: int, Ns: int, search_half_width_ppm: float = DEFAULT_SEARCH_PPM,
                 previous: float = 0.0, refine: bool = True) -> float:
    """SRO from the peak lag of the generalised cross-correlation of `p_bar`.

    The integer peak is searched over lags compatible with the SRO bound,
    then refined by golden-section search on [peak - 0.5, peak + 0.5].
    Returns `previous` when `p_bar` carries no usable peak.
    """
    p_bar = np.asarray(p_bar)
    N = 2 * (p_bar.size - 1)
    p = np.fft.irfft(p_bar, n=N)
    max_lag = int(np.floor(search_half_width_ppm * 1e-6 * ld * Ns))
    max_lag = min(max_lag, N // 2 - 1)
    lags = np.arange(-max_lag, max_lag + 1)
    mags = np.abs(p[lags % N])
    if not np.all(np.isfinite(mags)) or mags.max() <= 0.0:
        return previous
    lam = float(lags[int(np.argmax(mags))])
    if refine:
        lam = golden_section_max(lambda x: gcc_value(p_bar, x, N), lam - 0.5, lam + 0.5)
    eps = -lam / (ld * Ns)
    return float(np.clip(eps, -MAX_ABS_EPS, MAX_ABS_EPS))


@dataclass
class SroSyncState:
    """Per-peer estimation and compensation state held by the receiving node.

    drift_model
        ``"centre"``: accumulated drift is eps_hat times the local sample
        index at the frame centre. ``"cumulative"``: Ns times the running
        sum of past estimates. ``"anchored"`` (default): the centre rule
        at the first frame with a usable estimate, then Ns times each new
        estimate is added per frame.
    """

    peer: int
    N: int
    Ns: int
    ld: int = DEFAULT_LD
    alpha: float = DEFAULT_ALPHA
    search_half_width_ppm: float = DEFAULT_SEARCH_PPM
    use_fsd: bool = True
    drift_model: str = "anchored"
    eps_hat: float = 0.0
    tau_hat: float = 0.0
    fsd_count: int = 0
    frames: int = 0
    _coh: deque = field(default=None, repr=False)
    _events: deque = field(default=None, repr=False)
    p_bar: np.ndarray = field(default=None, repr=False)
    _eps_sum: float = 0.0
    _anchored: bool = False

    def __post_init__(self):
        if self.drift_model not in DRIFT_MODELS:
            raise ValueError(f"unknown drift model {self.drift_model!r}")
        n_bins = self.N // 2 + 1
        self._coh = deque(maxlen=self.ld + 1)
        self._events = deque(maxlen=self.ld)
        self.p_bar = np.zeros(n_bins, dtype=complex)

    @property
    def n_bins(self) -> int:
        return self.N // 2 + 1

    def step(self, y1, zq, rx_count_delta: int | None, frame_centre: float) -> int:
        """Consume one frame of uncompensated input; returns the FSD event."""
        event = 0
        if rx_count_delta is not None:
            event, _ = detect_fsd(rx_count_delta, self.Ns, self.N)
        if not self.use_fsd:
            event_used = 0
        else:
            event_used = event
            self.fsd_count += event
        self._coh.append(instantaneous_coherence(y1, zq))
        self._events.append(event_used)
        self.frames += 1
        if len(self._coh) == self.ld + 1:
            # frames i-ld+1..i; a surplus sample at the peer advances its window
            shift = sum(list(self._events)[-self.ld:])
            phi_ac = np.conj(fsd_phase(shift, self.n_bins, self.N))
            p = coherence_product(self._coh[-1], self._coh[0], phi_ac)
            self.p_bar = update_avg_product(self.p_bar, p, self.alpha)
            self.eps_hat = estimate_sro(self.p_bar, self.ld, self.Ns,
                                        self.search_half_width_ppm, self.eps_hat)
        self._eps_sum += self.eps_hat
        if self.drift_model == "centre":
            self.tau_hat = self.eps_hat * frame_centre
        elif self.drift_model == "cumulative":
            self.tau_hat = self.Ns * self._eps_sum
        elif not self._anchored:
            # the first usable estimate stands for all time elapsed so far
            if np.any(self.p_bar):
                self.tau_hat = self.eps_hat * frame_centre
                self._anchored = True
        else:
            self.tau_hat += self.Ns * self.eps_hat
        return event

    def compensation(self) -> np.ndarray:
        """Per-bin factor exp(j 2 pi nu tau_hat / N) times the accumulated FSD phase."""
        nu = _bins(self.n_bins)
        return np.exp(2j * np.pi * nu * self.tau_hat / self.N) * fsd_phase(self.fsd_count, self.n_bins, self.N)

    def compensate(self, zq) -> np.ndarray:
        return np.asarray(zq) * self.compensation()
