"""Discrete-event simulation of a fully connected asynchronous DANSE network.

Every node runs on its own sampling clock f_k = fs (1 + eps_1k). Event
times are exact rationals, so simultaneous events in a synchronous
network really coincide and are ordered by (kind, node index).

Two broadcast disciplines are simulated:

frame
    Each node fuses a WOLA frame and broadcasts the Ns samples finished by
    overlap-add. The broadcast of frame i happens when local sample
    i*Ns - 1 is acquired; the filter update of frame i one sample later.
sample
    Each node emits one fused sample per local sample through its
    distortion taps; frame updates happen when local sample i*Ns - 1 is
    acquired. Full-sample drifts show up as receive-count surpluses or
    deficits and are tracked per peer.

Local microphone frames are delayed by the pipeline delay of the fused
signals (Ns for frame broadcast, N - 1 for sample broadcast) so that local
and received windows cover the same instants. Outputs are shifted back,
so d_hat[n] estimates the desired component at local sample n.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction

import numpy as np

from . import danse as DN
from . import dsp
from . import gevd as G
from . import scene as SC
from . import sro as SR

log = logging.getLogger(__name__)

MODES = ("centralized", "sync-danse", "async-uncompensated", "async-sro", "async-sro-fsd")
NETWORK_MODES = MODES[1:]
_BROADCAST = {"sync-danse": "frame", "async-uncompensated": "frame",
              "async-sro": "sample", "async-sro-fsd": "sample"}

# event kinds; lower runs first at equal times
_EV_BROADCAST = 0
_EV_UPDATE = 1


class NetworkConsistencyError(RuntimeError):
    """Receive buffers ran dry outside the warm-up period."""


@dataclass
class NetworkOptions:
    beta: float = G.DEFAULT_BETA
    update_period: int = DN.DEFAULT_UPDATE_PERIOD
    ld: int = SR.DEFAULT_LD
    alpha: float = SR.DEFAULT_ALPHA
    search_half_width_ppm: float = SR.DEFAULT_SEARCH_PPM
    drift_model: str = "anchored"
    vad_threshold: float | None = None
    record_compensated: bool = False


@dataclass
class NetworkRun:
    mode: str
    broadcast: str
    delay: int
    outputs: list
    nodes: list
    fused_streams: list
    eps_hat: np.ndarray      # (K, K, frames) per receiving node and peer, NaN where unused
    tau_hat: np.ndarray
    fsd_event: np.ndarray    # (K, K, frames) detected events, 0 where none
    rx_delta: np.ndarray     # (K, K, frames) samples received per frame
    frame_times: list        # per node, wall-clock time (s) of each frame update
    tx_count: np.ndarray
    local_count: np.ndarray
    n_frames: np.ndarray
    vad: np.ndarray
    compensated: dict = field(default_factory=dict, repr=False)

    def true_sro(self, scenario: SC.Scenario) -> np.ndarray:
        return pairwise_sro([nd.sro_ppm for nd in scenario.nodes])

    def fsd_times(self, k: int, q: int) -> list:
        """(time_s, event) of every detected full-sample drift at node k from peer q."""
        idx = np.flatnonzero(self.fsd_event[k, q])
        return [(float(self.frame_times[k][i - 1]), int(self.fsd_event[k, q, i])) for i in idx]


def pairwise_sro(ppm) -> np.ndarray:
    """eps[k, q] with f_q = f_k (1 + eps[k, q]) from per-node offsets to node 1."""
    e = np.asarray(ppm, dtype=float) * 1e-6
    return (1 + e)[None, :] / (1 + e)[:, None] - 1


def clock_rate(fs: float, ppm: float) -> Fraction:
    """Exact sampling rate fs (1 + ppm 1e-6) from the decimal forms of the inputs."""
    return Fraction(Decimal(str(fs))) * (1 + Fraction(Decimal(str(ppm))) / 10 ** 6)


def _window(x: np.ndarray, end: int, N: int) -> np.ndarray:
    """Last N samples before `end` along the last axis; zeros before the stream start."""
    if end > x.shape[-1]:
        raise NetworkConsistencyError(f"window end {end} beyond {x.shape[-1]} samples")
    if end >= N:
        return x[..., end - N:end]
    out = np.zeros(x.shape[:-1] + (N,))
    if end > 0:
        out[..., N - end:] = x[..., :end]
    return out


def _floor(x: Fraction) -> int:
    return x.numerator // x.denominator


class _Simulator:
    def __init__(self, scene: SC.RenderedScene, mode: str, cfg: dsp.WolaConfig, opts: NetworkOptions):
        self.mode = mode
        self.broadcast = _BROADCAST[mode]
        self.cfg = cfg
        self.opts = opts
        sc = scene.scenario
        self.K = K = len(sc.nodes)
        N, Ns = cfg.N, cfg.Ns
        self.delay = Ns if self.broadcast == "frame" else N - 1
        self.mics = [np.atleast_2d(s.samples) for s in scene.per_node]
        self.L = np.array([m.shape[-1] for m in self.mics])
        self.rates = [clock_rate(sc.fs, nd.sro_ppm) for nd in sc.nodes]
        # keep Ns samples of margin so slower peers never run out at the end
        self.n_frames = (self.L - Ns) // Ns
        self.nodes = [DN.DanseNode(k, nd.n_mics, K, cfg, opts.beta, nd.ref_mic)
                      for k, nd in enumerate(sc.nodes)]
        if self.broadcast == "sample":
            for nd in self.nodes:
                nd.init_distortion(opts.update_period)
            self.tx = [np.zeros(n) for n in self.L]
        else:
            self.tx = [np.zeros(n + Ns) for n in self.L]
            self.ola = [dsp.OverlapAdd(cfg) for _ in range(K)]
        self.tx_count = np.zeros(K, dtype=np.int64)
        self.rx_count = np.zeros((K, K), dtype=np.int64)

        threshold = sc.vad_threshold if opts.vad_threshold is None else opts.vad_threshold
        n_max = int(self.n_frames.max())
        ends = np.arange(1, n_max + 1) * Ns - self.delay
        clean = scene.desired_reference[0].samples[sc.nodes[0].ref_mic]
        self.vad = np.concatenate([[False], SC.oracle_vad(clean, cfg, threshold, ends=ends)])

        use_sro = mode in ("async-sro", "async-sro-fsd")
        self.sync = [[None] * K for _ in range(K)]
        if use_sro:
            for k in range(K):
                for q in range(K):
                    if q != k:
                        self.sync[k][q] = SR.SroSyncState(
                            peer=q, N=N, Ns=Ns, ld=opts.ld, alpha=opts.alpha,
                            search_half_width_ppm=opts.search_half_width_ppm,
                            use_fsd=(mode == "async-sro-fsd"), drift_model=opts.drift_model)
        shape = (K, K, n_max + 1)
        self.eps_hat = np.full(shape, np.nan)
        self.tau_hat = np.full(shape, np.nan)
        self.fsd_event = np.zeros(shape, dtype=np.int64)
        self.rx_delta = np.zeros(shape, dtype=np.int64)
        self.frame_times = [np.zeros(int(n)) for n in self.n_frames]
        self.dhat = [np.zeros((int(n) + 1, cfg.n_bins), dtype=complex) for n in self.n_frames]
        self.compensated = {}

    # per-sample emission -------------------------------------------------
    def _flush(self, q: int, t: Fraction):
        target = min(int(self.L[q]), _floor(t * self.rates[q]) + 1)
        start = int(self.tx_count[q])
        if target <= start:
            return
        N = self.cfg.N
        block = DN.fused_block(self.mics[q], self.nodes[q].distortion.taps, start, target)
        if start < N:
            block[:min(N, target) - start] = 0.0  # warm-up
        self.tx[q][start:target] = block
        self.tx_count[q] = target

    def _flush_all(self, t: Fraction):
        for q in range(self.K):
            self._flush(q, t)

    # frame broadcast -------------------------------------------------------
    def _broadcast_frame(self, q: int, i: int):
        cfg = self.cfg
        y = dsp.analysis_frame(_window(self.mics[q], i * cfg.Ns, cfg.N), cfg).T
        z = self.nodes[q].fuse(y)
        out = self.ola[q].push(z)
        c = int(self.tx_count[q])
        self.tx[q][c:c + cfg.Ns] = out
        self.tx_count[q] = c + cfg.Ns

    # frame update ----------------------------------------------------------
    def _update(self, k: int, i: int, t: Fraction):
        cfg, N, Ns = self.cfg, self.cfg.N, self.cfg.Ns
        node = self.nodes[k]
        if self.broadcast == "sample":
            self._flush_all(t)
            if node.distortion.due(i):
                node.distortion.refresh(node.w_kk, cfg, i)
        end = i * Ns - self.delay
        y = dsp.analysis_frame(_window(self.mics[k], end, N), cfg).T  # (bins, M)
        parts = [y]
        centre = end - N // 2
        for q in range(self.K):
            if q == k:
                continue
            cnt = int(self.tx_count[q])
            delta = cnt - int(self.rx_count[k, q])
            self.rx_count[k, q] = cnt
            self.rx_delta[k, q, i] = delta
            if cnt < N and i * Ns > N:
                raise NetworkConsistencyError(f"node {k} frame {i}: only {cnt} samples from node {q}")
            z = dsp.analysis_frame(_window(self.tx[q], cnt, N), cfg)
            st = self.sync[k][q]
            if st is not None:
                ev = st.step(y[:, node.ref_mic], z, delta, centre)
                self.fsd_event[k, q, i] = ev
                z = st.compensate(z)
                self.eps_hat[k, q, i] = st.eps_hat
                self.tau_hat[k, q, i] = st.tau_hat
                if self.opts.record_compensated:
                    self.compensated.setdefault((k, q), []).append((i, end, z))
            elif self.broadcast == "sample":
                self.fsd_event[k, q, i] = delta - Ns
            parts.append(z[:, None])
        y_tilde = np.concatenate(parts, axis=1)
        self.dhat[k][i] = node.update(y_tilde, bool(self.vad[i]))
        self.frame_times[k][i - 1] = float(t)

    def run(self):
        heap = []
        Ns = self.cfg.Ns
        for k in range(self.K):
            if self.n_frames[k] >= 1:
                heapq.heappush(heap, self._next_events(k, 1)[0])
        while heap:
            t, kind, k, i = heapq.heappop(heap)
            if kind == _EV_BROADCAST:
                self._broadcast_frame(k, i)
                heapq.heappush(heap, (Fraction(i * Ns, 1) / self.rates[k], _EV_UPDATE, k, i))
            else:
                self._update(k, i, t)
                if i < self.n_frames[k]:
                    heapq.heappush(heap, self._next_events(k, i + 1)[0])
        if self.broadcast == "sample":
            self._flush_all(Fraction(10 ** 9))

    def _next_events(self, k: int, i: int):
        Ns = self.cfg.Ns
        t = Fraction(i * Ns - 1, 1) / self.rates[k]
        if self.broadcast == "frame":
            return [(t, _EV_BROADCAST, k, i)]
        return [(t, _EV_UPDATE, k, i)]

    def outputs(self, rates) -> list:
        cfg = self.cfg
        N, Ns, D = cfg.N, cfg.Ns, self.delay
        outs = []
        for k in range(self.K):
            L = int(self.L[k])
            off = N + D
            buf = np.zeros(L + 2 * N + D + Ns)
            segs = dsp.synthesis_frame(self.dhat[k], cfg)
            for i in range(1, int(self.n_frames[k]) + 1):
                p = i * Ns - N - D + off
                buf[p:p + N] += segs[i]
            # frame i covers local samples [i Ns - D - N, i Ns - D)
            outs.append(dsp.TimeSignal(buf[off:off + L], rates[k], k))
        return outs


def run_network(scene: SC.RenderedScene, mode: str, cfg: dsp.WolaConfig | None = None,
                options: NetworkOptions | None = None) -> NetworkRun:
    """Simulate one DANSE mode on a rendered scene.

    ``sync-danse`` always runs on the synchronised version of the scene;
    the other modes use the per-node clocks of `scene`.
    """
    if mode not in NETWORK_MODES:
        raise ValueError(f"unknown network mode {mode!r}; expected one of {NETWORK_MODES}")
    cfg = cfg or dsp.WolaConfig.sqrt_hann(1024)
    opts = options or NetworkOptions()
    if mode == "sync-danse":
        scene = scene.synchronized()
    sim = _Simulator(scene, mode, cfg, opts)
    sim.run()
    outs = sim.outputs([sig.rate_hz for sig in scene.per_node])
    return NetworkRun(
        mode=mode, broadcast=sim.broadcast, delay=sim.delay, outputs=outs, nodes=sim.nodes,
        fused_streams=[tx[:int(c)] for tx, c in zip(sim.tx, sim.tx_count)],
        eps_hat=sim.eps_hat, tau_hat=sim.tau_hat, fsd_event=sim.fsd_event,
        rx_delta=sim.rx_delta, frame_times=sim.frame_times, tx_count=sim.tx_count.copy(),
        local_count=sim.L.copy(), n_frames=sim.n_frames.copy(), vad=sim.vad,
        compensated=sim.compensated,
    )
