"""DANSE node: local fusion, per-sample fusion via distortion taps, filter updates.

Filters are stored on the one-sided bin grid (N/2 + 1 bins); the full
N-bin filter is its Hermitian extension, which keeps every time-domain
quantity real.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from . import gevd as G

log = logging.getLogger(__name__)

DEFAULT_UPDATE_PERIOD = 30


def fuse_frame(w_kk, y) -> np.ndarray:
    """Fused frame z = w_kk^H y per bin; w_kk and y are (bins, M)."""
    w_kk = np.asarray(w_kk)
    y = np.asarray(y)
    if w_kk.shape != y.shape:
        raise ValueError(f"filter {w_kk.shape} and frame {y.shape} differ in shape")
    return G.apply_filter(w_kk, y)


def window_crosscorr(cfg: dsp.WolaConfig) -> np.ndarray:
    """c[d] = sum_l h_s[l + d] h_a[l] for d = -(N-1)..N-1."""
    return np.correlate(cfg.synthesis_window, cfg.analysis_window, mode="full")


def compute_distortion_filter(w_kk, cfg: dsp.WolaConfig) -> np.ndarray:
    """Taps (M, 2N-1) of the undecimated WOLA filterbank applying w_kk^H.

    Running analysis, per-bin filtering and synthesis with a hop of one
    sample and dividing by Ns is a linear time-invariant filter. Its
    impulse response at lag d is m[d mod N] c[d] / Ns, where m is the
    inverse DFT of conj(w_kk) and c the window cross-correlation. Tap r
    holds lag r - (N - 1), so convolving with the taps gives the WOLA
    output delayed by N - 1 samples.
    """
    w = np.atleast_2d(np.asarray(w_kk))
    if w.shape[0] != cfg.n_bins:
        raise ValueError(f"filter has {w.shape[0]} bins, expected {cfg.n_bins}")
    N = cfg.N
    m = np.fft.irfft(np.conj(w), n=N, axis=0).T  # (M, N)
    lags = np.arange(-(N - 1), N)
    return m[:, lags % N] * window_crosscorr(cfg)[None, :] / cfg.Ns


@dataclass
class DistortionFilter:
    taps: np.ndarray
    last_update: int = 0
    update_period: int = DEFAULT_UPDATE_PERIOD

    @classmethod
    def from_filter(cls, w_kk, cfg: dsp.WolaConfig, iteration: int = 0,
                    update_period: int = DEFAULT_UPDATE_PERIOD) -> "DistortionFilter":
        return cls(compute_distortion_filter(w_kk, cfg), iteration, update_period)

    @property
    def delay(self) -> int:
        return (self.taps.shape[-1] - 1) // 2

    def due(self, iteration: int) -> bool:
        return iteration % self.update_period == 0

    def refresh(self, w_kk, cfg: dsp.WolaConfig, iteration: int):
        self.taps = compute_distortion_filter(w_kk, cfg)
        self.last_update = iteration


def fused_sample(history, taps) -> float:
    """One fused sample from the most recent samples per mic.

    `history` is (M, L) with the newest sample last; missing older samples
    count as zeros.
    """
    h = np.atleast_2d(np.asarray(history, dtype=float))
    taps = np.atleast_2d(taps)
    n_taps = taps.shape[-1]
    if h.shape[-1] < n_taps:
        h = np.concatenate([np.zeros((h.shape[0], n_taps - h.shape[-1])), h], axis=-1)
    recent = h[:, -n_taps:][:, ::-1]
    return float(np.sum(recent * taps))


def fused_block(mics, taps, start: int, stop: int) -> np.ndarray:
    """Fused samples start..stop-1 of a mic block (M, L); same as repeated fused_sample."""
    mics = np.atleast_2d(mics)
    taps = np.atleast_2d(taps)
    n_taps = taps.shape[-1]
    lo = start - (n_taps - 1)
    seg = np.zeros((mics.shape[0], stop - lo))
    src_lo = max(lo, 0)
    seg[:, src_lo - lo:] = mics[:, src_lo:stop]
    out = np.zeros(stop - start)
    for m in range(mics.shape[0]):
        if np.any(taps[m]):
            out += dsp.convolve(seg[m], taps[m])[n_taps - 1:n_taps - 1 + stop - start]
    return out


@dataclass
class DanseNode:
    """Per-node filters and covariance state.

    The stacked filter w_tilde has M_k local entries followed by one gain
    per peer; it starts as the selector of the local reference mic.
    """

    index: int
    n_mics: int
    n_nodes: int
    cfg: dsp.WolaConfig
    beta: float = G.DEFAULT_BETA
    ref_mic: int = 0
    w_tilde: np.ndarray = field(default=None, repr=False)
    cov: G.CovariancePair = field(default=None, repr=False)
    distortion: DistortionFilter | None = field(default=None, repr=False)
    frame_index: int = 0
    n_updates: int = 0

    def __post_init__(self):
        dim = self.dim
        if self.w_tilde is None:
            self.w_tilde = G.selector(self.cfg.n_bins, dim, self.ref_mic)
        if self.cov is None:
            self.cov = G.CovariancePair.zeros(self.cfg.n_bins, dim, self.beta)

    @property
    def dim(self) -> int:
        return self.n_mics + self.n_nodes - 1

    @property
    def w_kk(self) -> np.ndarray:
        return self.w_tilde[:, :self.n_mics]

    @property
    def peer_gains(self) -> np.ndarray:
        return self.w_tilde[:, self.n_mics:]

    def fuse(self, y) -> np.ndarray:
        return fuse_frame(self.w_kk, y)

    def init_distortion(self, update_period: int = DEFAULT_UPDATE_PERIOD):
        self.distortion = DistortionFilter.from_filter(self.w_kk, self.cfg, 0, update_period)

    def update(self, y_tilde, vad_active: bool) -> np.ndarray:
        """Covariance and filter update on a stacked frame; returns the output frame.

        The output uses the freshly updated filter, d[i] = w[i + 1]^H y_tilde[i].
        """
        y_tilde = np.asarray(y_tilde)
        if y_tilde.shape != (self.cfg.n_bins, self.dim):
            raise ValueError(f"stacked frame {y_tilde.shape} does not match dimension {self.dim}")
        self.cov.update(y_tilde, vad_active)
        self.w_tilde, mask = G.update_filter(self.cov, self.w_tilde, self.ref_mic)
        if mask.any():
            self.n_updates += 1
        self.frame_index += 1
        return G.apply_filter(self.w_tilde, y_tilde)


def danse_filter_update(node: DanseNode, y_tilde, vad_active: bool) -> np.ndarray:
    node.update(y_tilde, vad_active)
    return node.w_tilde
