"""Acoustic scene: image-source RIRs, source mixing, clock skew and oracle VAD."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from . import dsp

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
DEFAULT_JITTER_M = 0.05
DEFAULT_VAD_THRESHOLD = 1e-3
MIN_IMAGE_GAIN = 1e-8
SINC_HALF_WIDTH = 32

# speech cadence: leading silence, snippet length, gap (seconds)
LEAD_SILENCE_S = 0.25
SNIPPET_S = 3.0
GAP_S = 2.0


class SceneError(ValueError):
    pass


@dataclass
class SourceSpec:
    position: np.ndarray
    kind: str = "noise"  # "speech" or "noise"

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.kind not in ("speech", "noise"):
            raise SceneError(f"unknown source kind {self.kind!r}")


@dataclass
class NodeSpec:
    mic_positions: np.ndarray
    sro_ppm: float = 0.0
    ref_mic: int = 0

    def __post_init__(self):
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))
        if self.mic_positions.shape[-1] != 3 or self.mic_positions.shape[0] < 1:
            raise SceneError("a node needs at least one 3-D microphone position")
        if not 0 <= self.ref_mic < self.n_mics:
            raise SceneError(f"reference mic {self.ref_mic} out of range")

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    @classmethod
    def linear_array(cls, centre, n_mics: int, spacing: float = 0.2, sro_ppm: float = 0.0,
                     axis=(1.0, 0.0, 0.0)) -> "NodeSpec":
        centre = np.asarray(centre, dtype=float)
        axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
        offs = (np.arange(n_mics) - (n_mics - 1) / 2.0) * spacing
        return cls(centre + offs[:, None] * axis, sro_ppm)


@dataclass
class Scenario:
    room_dims: np.ndarray
    absorption: float
    nodes: list
    sources: list
    fs: float = 16000.0
    snr_db: float = -3.0
    duration_s: float = 15.0
    rir_length: int = 4096
    seed: int = 0
    jitter_m: float = DEFAULT_JITTER_M
    vad_threshold: float = DEFAULT_VAD_THRESHOLD
    speech_wav: str | None = None
    t60_s: float | None = None

    def __post_init__(self):
        self.room_dims = np.asarray(self.room_dims, dtype=float).reshape(3)
        if np.any(self.room_dims <= 0):
            raise SceneError("room dimensions must be positive")
        if not 0.0 < self.absorption <= 1.0:
            raise SceneError("absorption must lie in (0, 1]")
        if not self.nodes:
            raise SceneError("scenario has no nodes")
        if self.nodes[0].sro_ppm != 0.0:
            raise SceneError("node 1 is the reference clock and must have sro_ppm = 0")
        kinds = [s.kind for s in self.sources]
        if kinds.count("speech") != 1:
            raise SceneError("exactly one desired (speech) source is required")
        if kinds.count("noise") < 1:
            raise SceneError("at least one noise source is required")
        for p in self._all_positions():
            if np.any(p <= 0) or np.any(p >= self.room_dims):
                raise SceneError(f"position {p} is not strictly inside the room")
        if np.isnan(self.snr_db) or self.snr_db == -np.inf:
            raise SceneError("snr_db must be finite or +inf (noise-free)")
        if self.t60_s is not None and not self.t60_s > 0:
            raise SceneError("t60_s must be positive")
        for nd in self.nodes:
            if abs(nd.sro_ppm) > 1000:
                raise SceneError("SROs beyond 1000 PPM are outside the supported clock model")

    def _all_positions(self):
        for nd in self.nodes:
            yield from nd.mic_positions
        for s in self.sources:
            yield s.position

    @property
    def wall_reflection(self) -> float:
        """Pressure reflection coefficient of the walls.

        sqrt(1 - absorption) by default. With a target `t60_s` the
        coefficient is chosen so that the Eyring decay of the room matches it.
        """
        if self.t60_s is None:
            return float(np.sqrt(1.0 - self.absorption))
        Lx, Ly, Lz = self.room_dims
        volume = Lx * Ly * Lz
        surface = 2 * (Lx * Ly + Ly * Lz + Lx * Lz)
        return float(np.exp(-0.5 * 24 * np.log(10) * volume / (SPEED_OF_SOUND * surface * self.t60_s)))

    @property
    def desired(self) -> SourceSpec:
        return next(s for s in self.sources if s.kind == "speech")

    @property
    def noises(self) -> list:
        return [s for s in self.sources if s.kind == "noise"]

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.fs))

    @property
    def mics_per_node(self) -> list:
        return [nd.n_mics for nd in self.nodes]

    def with_sros(self, ppm) -> "Scenario":
        """Copy with node k > 1 given SRO ppm[k - 2] relative to node 1."""
        ppm = list(ppm)
        if len(ppm) != len(self.nodes) - 1:
            raise SceneError(f"expected {len(self.nodes) - 1} SRO values, got {len(ppm)}")
        nodes = [self.nodes[0]] + [replace(nd, sro_ppm=float(p)) for nd, p in zip(self.nodes[1:], ppm)]
        return replace(self, nodes=nodes)


SRO_SETS = {
    "small": (20.0, -20.0, 40.0),
    "moderate": (50.0, -50.0, 100.0),
    "large": (200.0, -200.0, 400.0),
}


def default_scenario(seed: int = 0, sro_set: str | None = None) -> Scenario:
    """Four nodes with {1, 3, 2, 5} mics in a 5 m cube; layout is approximate."""
    z = 1.5
    nodes = [
        NodeSpec.linear_array((1.0, 4.0, z), 1),
        NodeSpec.linear_array((4.0, 4.0, z), 3),
        NodeSpec.linear_array((4.0, 1.0, z), 2, axis=(0.0, 1.0, 0.0)),
        NodeSpec.linear_array((1.5, 1.2, z), 5),
    ]
    sources = [
        SourceSpec((2.0, 2.2, z), "speech"),
        SourceSpec((1.6, 3.2, z), "noise"),
        SourceSpec((3.4, 2.4, z), "noise"),
    ]
    sc = Scenario(room_dims=(5.0, 5.0, 5.0), absorption=0.9, nodes=nodes, sources=sources,
                  seed=seed, t60_s=0.15)
    if sro_set is not None:
        sc = sc.with_sros(SRO_SETS[sro_set])
    return sc


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def simulate_rir(scenario: Scenario, source_pos, mic_pos, jitter_key=None) -> np.ndarray:
    """Image-source room impulse response with jittered image positions.

    Walls reflect with `scenario.wall_reflection`. Every image except the direct
    path is displaced by a uniform offset of up to `scenario.jitter_m` per
    axis, drawn from a generator seeded by (seed, *jitter_key). Each image
    is placed with a Hann-windowed fractional-delay sinc and attenuated by
    1 / (4 pi d).
    """
    src = np.asarray(source_pos, dtype=float)
    mic = np.asarray(mic_pos, dtype=float)
    if np.linalg.norm(src - mic) < 1e-6:
        raise SceneError("source and microphone coincide")
    L = scenario.room_dims
    fs, n_taps = scenario.fs, scenario.rir_length
    refl = scenario.wall_reflection
    max_dist = (n_taps + SINC_HALF_WIDTH) / fs * SPEED_OF_SOUND
    if refl > 0:
        max_order = int(np.floor(np.log(MIN_IMAGE_GAIN) / np.log(refl)))
    else:
        max_order = 0

    # per axis: image coordinate and number of wall hits for (n, p)
    coords, orders = [], []
    for ax in range(3):
        n_max = int(np.ceil(max_dist / (2 * L[ax]))) + 1
        n = np.arange(-n_max, n_max + 1)
        c = np.concatenate([2 * n * L[ax] + src[ax], 2 * n * L[ax] - src[ax]])
        o = np.concatenate([np.abs(2 * n), np.abs(2 * n - 1)])
        coords.append(c)
        orders.append(o)
    cx, cy, cz = np.meshgrid(*coords, indexing="ij")
    ox, oy, oz = np.meshgrid(*orders, indexing="ij")
    pos = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1)
    order = (ox + oy + oz).ravel()
    keep = order <= max_order
    pos, order = pos[keep], order[keep]
    if scenario.jitter_m > 0:
        key = (0, 0) if jitter_key is None else tuple(jitter_key)
        jitter = _rng(scenario.seed, 2, *key).uniform(-scenario.jitter_m, scenario.jitter_m, pos.shape)
        jitter[order == 0] = 0.0
        pos = pos + jitter
    dist = np.linalg.norm(pos - mic, axis=1)
    keep = dist < max_dist
    dist, order = dist[keep], order[keep]
    gain = np.where(order == 0, 1.0, refl ** order) / (4 * np.pi * dist)

    delay = dist / SPEED_OF_SOUND * fs
    base = np.floor(delay).astype(np.int64)
    offs = np.arange(-SINC_HALF_WIDTH + 1, SINC_HALF_WIDTH + 1)
    idx = base[:, None] + offs[None, :]
    t = idx - delay[:, None]
    win = 0.5 * (1 + np.cos(np.pi * t / SINC_HALF_WIDTH))
    taps = gain[:, None] * np.sinc(t) * win
    ok = (idx >= 0) & (idx < n_taps)
    return np.bincount(idx[ok], weights=taps[ok], minlength=n_taps)[:n_taps]


def schroeder_t60(rir, fs: float, lo_db: float = -5.0, hi_db: float = -25.0) -> float:
    """T60 extrapolated from a linear fit of the Schroeder decay between lo_db and hi_db."""
    e = np.cumsum(np.asarray(rir, dtype=float)[::-1] ** 2)[::-1]
    edc = 10 * np.log10(e / e[0] + 1e-300)
    sel = (edc <= lo_db) & (edc >= hi_db)
    if sel.sum() < 2:
        raise SceneError("decay curve does not span the fit range")
    t = np.flatnonzero(sel) / fs
    slope = np.polyfit(t, edc[sel], 1)[0]
    return -60.0 / slope


def read_wav(path, fs: float | None = None) -> dsp.TimeSignal:
    """Mono 16-bit PCM or float WAV; resampled to `fs` when the rates differ."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise SceneError(f"{path}: expected a mono WAV, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(float) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(float)
    else:
        raise SceneError(f"{path}: unsupported sample format {data.dtype}")
    if fs is not None and rate != fs:
        g = np.gcd(int(rate), int(fs))
        x = sps.resample_poly(x, int(fs) // g, int(rate) // g)
        rate = fs
    return dsp.TimeSignal(x, float(rate))


_VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240],
    [530, 1840, 2480], [660, 1720, 2410], [570, 840, 2410],
    [440, 1020, 2240], [490, 1350, 1690],
])


def synthetic_speech(duration_s: float, fs: float, seed: int = 0) -> dsp.TimeSignal:
    """Speech-like test signal used when no recording is supplied.

    Glottal pulse train with a wandering pitch, shaped by vowel formants
    that change every syllable, plus fricative noise bursts and a syllabic
    envelope around 4 Hz. It is nonstationary and band-limited like speech
    but carries no linguistic content.
    """
    rng = _rng(seed, 3)
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    pos = 0
    f0 = rng.uniform(100, 180)
    while pos < n:
        syl = int(rng.uniform(0.12, 0.3) * fs)
        seg_n = min(syl, n - pos)
        f0 = float(np.clip(f0 * np.exp(rng.normal(0, 0.08)), 85, 240))
        tt = np.arange(seg_n) / fs
        phase = np.cumsum(np.full(seg_n, f0 / fs) * (1 + 0.03 * np.sin(2 * np.pi * 5 * tt)))
        pulses = np.diff(np.floor(phase), prepend=0.0)
        exc = sps.lfilter([1.0], [1.0, -0.95], pulses)
        if rng.random() < 0.25:
            exc = 0.3 * rng.standard_normal(seg_n)
        seg = np.zeros(seg_n)
        for fc, bw in zip(_VOWELS[rng.integers(len(_VOWELS))], (80, 120, 160)):
            r = np.exp(-np.pi * bw / fs)
            th = 2 * np.pi * fc / fs
            seg += sps.lfilter([1 - r], [1, -2 * r * np.cos(th), r * r], exc)
        env = np.sin(np.pi * np.arange(seg_n) / max(seg_n, 1)) ** 2
        out[pos:pos + seg_n] = seg * env
        pos += seg_n
        if rng.random() < 0.15:
            pos += int(rng.uniform(0.05, 0.2) * fs)
    out = sps.sosfilt(sps.butter(4, [70, 6000], btype="band", fs=fs, output="sos"), out)
    return dsp.TimeSignal(out / (np.max(np.abs(out)) + 1e-12) * 0.5, fs)


def speech_cadence(speech, n: int, fs: float) -> np.ndarray:
    """Lay out consecutive snippets of `speech` with leading silence and gaps."""
    speech = np.asarray(speech, dtype=float)
    if speech.size == 0:
        raise SceneError("speech signal is empty")
    out = np.zeros(n)
    snip = int(round(SNIPPET_S * fs))
    start = int(round(LEAD_SILENCE_S * fs))
    src = 0
    while start < n:
        stop = min(start + snip, n)
        take = stop - start
        idx = (src + np.arange(take)) % speech.size
        out[start:stop] = speech[idx]
        src += take
        start += snip + int(round(GAP_S * fs))
    return out


def oracle_vad(clean, cfg: dsp.WolaConfig, threshold_rel: float = DEFAULT_VAD_THRESHOLD,
               ends=None) -> np.ndarray:
    """Frame-wise speech activity from the clean desired signal.

    Frame windows hold the N samples ending at `ends` (exclusive); the
    default is the STFT framing where frame i ends at (i + 1) * Ns.
    """
    x = np.asarray(getattr(clean, "samples", clean), dtype=float)
    if x.ndim > 1:
        x = x[0]
    if ends is None:
        ends = (np.arange(-(-x.size // cfg.Ns) + 1) + 1) * cfg.Ns
    ends = np.asarray(ends, dtype=np.int64)
    csum = np.concatenate([[0.0], np.cumsum(x ** 2)])
    hi = np.clip(ends, 0, x.size)
    lo = np.clip(ends - cfg.N, 0, x.size)
    energy = csum[hi] - csum[lo]
    peak = energy.max() if energy.size else 0.0
    if peak <= 0:
        return np.zeros(energy.size, dtype=bool)
    return energy > threshold_rel * peak


@dataclass
class RenderedScene:
    """Microphone signals of every node on its own clock, plus components.

    `desired` and `noise` hold the per-node components on the node clock;
    the ``*_reference`` fields hold the same signals before clock skew.
    """

    scenario: Scenario
    per_node: list
    desired: list
    noise: list
    per_node_reference: list
    desired_reference: list
    noise_reference: list
    vad_flags: np.ndarray
    source_signals: dict = field(default_factory=dict, repr=False)

    @property
    def clean_desired_at_ref(self) -> list:
        out = []
        for nd, d in zip(self.scenario.nodes, self.desired):
            out.append(dsp.TimeSignal(d.samples[nd.ref_mic], d.rate_hz, d.clock_owner))
        return out

    def synchronized(self) -> "RenderedScene":
        """The same scene with every node on the reference clock."""
        sc = self.scenario.with_sros([0.0] * (len(self.scenario.nodes) - 1))
        return replace(self, scenario=sc, per_node=list(self.per_node_reference),
                       desired=list(self.desired_reference), noise=list(self.noise_reference))


def render_scene(scenario: Scenario, speech: dsp.TimeSignal | None = None,
                 cfg: dsp.WolaConfig | None = None) -> RenderedScene:
    """Mix desired speech and white noise sources in the room and skew clocks.

    Noise sources share one gain chosen so that desired-to-noise power at
    the reference mic of node 1 equals `scenario.snr_db` over the run.
    """
    if speech is None:
        if scenario.speech_wav:
            speech = read_wav(scenario.speech_wav, scenario.fs)
        else:
            raise SceneError("no speech signal supplied and scenario names no WAV file")
    if abs(speech.rate_hz - scenario.fs) > 1e-9:
        raise SceneError(f"speech rate {speech.rate_hz} differs from {scenario.fs}")
    cfg = cfg or dsp.WolaConfig.sqrt_hann(1024)
    n, fs = scenario.n_samples, scenario.fs
    s = speech_cadence(speech.samples, n, fs)
    noises = [_rng(scenario.seed, 1, j).standard_normal(n) for j in range(len(scenario.noises))]

    src_signals = [s] + noises
    src_specs = [scenario.desired] + scenario.noises
    des, noi = [], []
    mic_id = 0
    for nd in scenario.nodes:
        d_node = np.zeros((nd.n_mics, n))
        n_node = np.zeros((nd.n_mics, n))
        for m in range(nd.n_mics):
            for j, (spec, sig) in enumerate(zip(src_specs, src_signals)):
                h = simulate_rir(scenario, spec.position, nd.mic_positions[m], (j, mic_id))
                y = dsp.convolve(sig, h)[:n]
                if j == 0:
                    d_node[m] = y
                else:
                    n_node[m] += y
            mic_id += 1
        des.append(d_node)
        noi.append(n_node)

    ref = scenario.nodes[0].ref_mic
    p_d = np.mean(des[0][ref] ** 2)
    p_n = np.mean(noi[0][ref] ** 2)
    if p_n > 0 and p_d > 0 and np.isfinite(scenario.snr_db):
        gain = np.sqrt(p_d / p_n * 10 ** (-scenario.snr_db / 10))
    else:
        gain = 0.0
    noi = [gain * x for x in noi]

    per_ref, des_ref, noi_ref, per, des_sk, noi_sk = [], [], [], [], [], []
    for k, nd in enumerate(scenario.nodes):
        mix = des[k] + noi[k]
        per_ref.append(dsp.TimeSignal(mix, fs, "reference"))
        des_ref.append(dsp.TimeSignal(des[k], fs, "reference"))
        noi_ref.append(dsp.TimeSignal(noi[k], fs, "reference"))
        ratio = 1.0 + nd.sro_ppm * 1e-6
        owner = k
        if ratio == 1.0:
            per.append(dsp.TimeSignal(mix, fs, owner))
            des_sk.append(dsp.TimeSignal(des[k], fs, owner))
            noi_sk.append(dsp.TimeSignal(noi[k], fs, owner))
        else:
            both = dsp.resample(np.concatenate([des[k], noi[k]]), ratio)
            d_r, n_r = both[:nd.n_mics], both[nd.n_mics:]
            per.append(dsp.TimeSignal(d_r + n_r, fs * ratio, owner))
            des_sk.append(dsp.TimeSignal(d_r, fs * ratio, owner))
            noi_sk.append(dsp.TimeSignal(n_r, fs * ratio, owner))

    vad = oracle_vad(des[0][ref], cfg, scenario.vad_threshold)
    return RenderedScene(
        scenario=scenario, per_node=per, desired=des_sk, noise=noi_sk,
        per_node_reference=per_ref, desired_reference=des_ref, noise_reference=noi_ref, vad_flags=vad,
        source_signals={"speech": s, "noise": [gain * x for x in noises]},
    )
