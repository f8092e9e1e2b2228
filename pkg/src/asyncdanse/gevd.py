"""Covariance tracking, GEVD and the rank-1 GEVD-MWF.

All routines are batched over leading axes, so a whole set of frequency
bins is processed with one call: covariances are (..., C, C), frames and
filters (..., C).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import dsp

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.978
DEFAULT_INIT_SCALE = 1e-6
DEFAULT_LOADING_REL = 1e-10


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class DegenerateFilterError(ValueError):
    pass


@dataclass
class CovariancePair:
    """Exponentially averaged speech+noise and noise-only covariances."""

    Ryy: np.ndarray
    Rnn: np.ndarray
    beta: float
    n_speech: np.ndarray
    n_noise: np.ndarray

    @classmethod
    def zeros(cls, n_bins: int, C: int, beta: float = DEFAULT_BETA,
              init_scale: float = DEFAULT_INIT_SCALE) -> "CovariancePair":
        if not 0.0 < beta < 1.0:
            raise ValueError(f"forgetting factor must lie in (0, 1), got {beta}")
        eye = np.broadcast_to(np.eye(C, dtype=complex), (n_bins, C, C))
        return cls(
            Ryy=init_scale * eye.copy(),
            Rnn=init_scale * eye.copy(),
            beta=beta,
            n_speech=np.zeros(n_bins, dtype=int),
            n_noise=np.zeros(n_bins, dtype=int),
        )

    @property
    def dim(self) -> int:
        return self.Ryy.shape[-1]

    def update(self, frame, vad_active: bool) -> "CovariancePair":
        """Fold one frame (n_bins, C) into Ryy if speech is active, else Rnn."""
        y = np.asarray(frame)
        if y.shape != self.Ryy.shape[:-1]:
            raise ValueError(f"frame shape {y.shape} does not match covariance {self.Ryy.shape}")
        outer = y[..., :, None] * np.conj(y[..., None, :])
        if vad_active:
            self.Ryy = self.beta * self.Ryy + (1.0 - self.beta) * outer
            self.n_speech += 1
        else:
            self.Rnn = self.beta * self.Rnn + (1.0 - self.beta) * outer
            self.n_noise += 1
        return self

    def ready(self) -> np.ndarray:
        """Bins that have seen at least C speech and C noise updates."""
        C = self.dim
        return (self.n_speech >= C) & (self.n_noise >= C)


def update_covariance(state: CovariancePair, frame, vad_active: bool) -> CovariancePair:
    return state.update(frame, vad_active)


@dataclass
class GevdResult:
    """Joint diagonalisation Ryy = Q diag(sigma) Q^H, Rnn = Q Q^H.

    `X` holds the generalised eigenvectors themselves, X = Q^{-H}.
    """

    Q: np.ndarray
    X: np.ndarray
    sigma: np.ndarray

    @property
    def lambda1(self) -> np.ndarray:
        return 1.0 - 1.0 / self.sigma[..., 0]


def _hermitian_part(A):
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


def gevd(Ryy, Rnn, loading=None) -> GevdResult:
    """GEVD of the pencil (Ryy, Rnn) via Cholesky whitening.

    `loading` is added to the diagonal of Rnn before factorisation; by
    default it is 1e-10 * trace(Rnn) / C per bin.
    """
    Ryy = np.asarray(Ryy)
    Rnn = np.asarray(Rnn)
    C = Rnn.shape[-1]
    if loading is None:
        loading = DEFAULT_LOADING_REL * np.real(np.trace(Rnn, axis1=-2, axis2=-1)) / C
    loading = np.asarray(loading, dtype=float)[..., None, None]
    eye = np.eye(C)
    try:
        L = np.linalg.cholesky(_hermitian_part(Rnn) + loading * eye)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("noise covariance is not positive definite") from exc
    Linv = np.linalg.inv(L)
    A = _hermitian_part(Linv @ Ryy @ np.conj(np.swapaxes(Linv, -1, -2)))
    sigma, V = np.linalg.eigh(A)
    # descending order; stable sort keeps ties in eigh's column order
    order = np.argsort(-sigma, axis=-1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=-1)
    V = np.take_along_axis(V, order[..., None, :], axis=-1)
    Q = L @ V
    X = np.conj(np.swapaxes(Linv, -1, -2)) @ V
    return GevdResult(Q=Q, X=X, sigma=sigma)


def gevd_mwf_filter(g: GevdResult, ref: int = 0) -> np.ndarray:
    """Rank-1 GEVD-MWF w = Q^{-H} diag(1 - 1/sigma_1, 0, ...) Q^H e_ref."""
    s1 = g.sigma[..., 0]
    if np.any(s1 == 0):
        raise DegenerateFilterError("largest generalised eigenvalue is zero")
    lam = g.lambda1
    if np.any(lam < 0):
        log.debug("sigma_1 < 1 in %d bin(s); using negative gain unmodified", int(np.sum(lam < 0)))
    return (lam * np.conj(g.Q[..., ref, 0]))[..., None] * g.X[..., :, 0]


def selector(n_bins: int, C: int, ref: int = 0) -> np.ndarray:
    w = np.zeros((n_bins, C), dtype=complex)
    w[:, ref] = 1.0
    return w


def update_filter(cov: CovariancePair, w_prev, ref: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """GEVD-MWF update with the start-up and singularity fallbacks.

    Bins that have not collected enough covariance updates, or whose noise
    covariance cannot be factorised, keep `w_prev`. Returns the new filter
    and a boolean mask of the bins that were updated.
    """
    w = np.array(w_prev, dtype=complex, copy=True)
    ready = cov.ready()
    if not ready.any():
        return w, ready
    idx = np.flatnonzero(ready)
    try:
        w[idx] = gevd_mwf_filter(gevd(cov.Ryy[idx], cov.Rnn[idx]), ref)
        return w, ready
    except SingularCovarianceError:
        pass
    done = np.zeros_like(ready)
    for b in idx:
        try:
            w[b] = gevd_mwf_filter(gevd(cov.Ryy[b], cov.Rnn[b]), ref)
            done[b] = True
        except (SingularCovarianceError, DegenerateFilterError):
            log.warning("bin %d: singular pencil, keeping previous filter", b)
    return w, done


def apply_filter(w, y) -> np.ndarray:
    """Per-bin output w^H y for filters (..., C) and frames (..., C)."""
    return np.sum(np.conj(w) * y, axis=-1)


@dataclass
class CentralizedResult:
    estimates: list          # per-node d-hat, reference clock
    filter_norm: np.ndarray  # (frames, K) mean |w| over bins
    cfg: dsp.WolaConfig


def centralized_enhance(scene, cfg: dsp.WolaConfig, beta: float = DEFAULT_BETA,
                        vad=None) -> CentralizedResult:
    """Synchronised centralised GEVD-MWF for every node of `scene`.

    All M microphones are stacked; the pencil is shared, only the
    reference selector differs between nodes.
    """
    mics = [np.atleast_2d(sig.samples) for sig in scene.per_node]
    length = min(m.shape[-1] for m in mics)
    y = np.concatenate([m[:, :length] for m in mics], axis=0)
    refs = np.cumsum([0] + [m.shape[0] for m in mics[:-1]])
    Y = np.moveaxis(dsp.stft(y, cfg), 0, -1)  # (frames, bins, M)
    n_frames, n_bins, M = Y.shape
    if vad is None:
        vad = scene.vad_flags
    vad = np.asarray(vad, dtype=bool)
    cov = CovariancePair.zeros(n_bins, M, beta)
    W = [selector(n_bins, M, r) for r in refs]
    D = np.zeros((len(refs), n_frames, n_bins), dtype=complex)
    norms = np.zeros((n_frames, len(refs)))
    for i in range(n_frames):
        cov.update(Y[i], bool(vad[min(i, vad.size - 1)]))
        ready = cov.ready()
        if ready.any():
            idx = np.flatnonzero(ready)
            try:
                g = gevd(cov.Ryy[idx], cov.Rnn[idx])
                for k, r in enumerate(refs):
                    W[k][idx] = gevd_mwf_filter(g, r)
            except (SingularCovarianceError, DegenerateFilterError):
                for k, r in enumerate(refs):
                    W[k], _ = update_filter(cov, W[k], r)
        for k in range(len(refs)):
            D[k, i] = apply_filter(W[k], Y[i])
            norms[i, k] = np.mean(np.abs(W[k]))
    out = dsp.istft(D, cfg, length=length)
    rate = scene.per_node[0].rate_hz
    estimates = [dsp.TimeSignal(out[k], rate, "reference") for k in range(len(refs))]
    return CentralizedResult(estimates=estimates, filter_norm=norms, cfg=cfg)
