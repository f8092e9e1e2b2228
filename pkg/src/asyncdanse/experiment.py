"""Experiment runner: render a scene, run modes, score and export."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import config as C
from . import dsp
from . import gevd as G
from . import metrics as M
from . import network as NW
from . import scene as SC

log = logging.getLogger(__name__)

SRO_SET_CHOICES = ("small", "moderate", "large", "custom")
CSV_FIELDS = ("node", "n_mics", "mode", "input_segsnr_db", "output_segsnr_db", "oracle_distance_db")
TRACE_FIELDS = ("frame", "pair", "eps_hat_ppm", "tau_hat_samples", "fsd_event")


@dataclass
class MetricsReport:
    per_node: dict                       # node -> {"n_mics", "input_segsnr_db", "modes": {mode: {...}}}
    sro_traces: dict = field(default_factory=dict)   # "k-q" -> rows (frame, eps ppm, tau, event)
    fsd_events: dict = field(default_factory=dict)   # "k-q" -> [(time_s, event)]
    run_meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {"run_meta": self.run_meta, "per_node": self.per_node,
                "fsd_events": self.fsd_events}
        return json.dumps(body, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for node, entry in sorted(self.per_node.items(), key=lambda kv: int(kv[0])):
            for mode, vals in entry["modes"].items():
                w.writerow([node, entry["n_mics"], mode, _fmt(entry["input_segsnr_db"]),
                            _fmt(vals["output_segsnr_db"]), _fmt(vals["oracle_distance_db"])])
        return buf.getvalue()

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for pair, rows in self.sro_traces.items():
            for frame, eps, tau, ev in rows:
                w.writerow([frame, pair, _fmt(eps), _fmt(tau), ev])
        return buf.getvalue()


def _fmt(x) -> str:
    return "nan" if x is None or not np.isfinite(x) else f"{x:.6f}"


def _finite(x):
    return float(x) if np.isfinite(x) else None


def prepare_scenario(cfg: C.ExperimentConfig, sro_set: str = "custom", seed: int | None = None) -> SC.Scenario:
    sc = cfg.scenario
    if sro_set not in SRO_SET_CHOICES:
        raise ValueError(f"unknown SRO set {sro_set!r}; expected one of {SRO_SET_CHOICES}")
    if sro_set != "custom":
        sc = sc.with_sros(SC.SRO_SETS[sro_set])
    if seed is not None:
        sc = replace(sc, seed=int(seed))
    return sc


def load_speech(sc: SC.Scenario) -> dsp.TimeSignal:
    if sc.speech_wav:
        return SC.read_wav(sc.speech_wav, sc.fs)
    return SC.synthetic_speech(sc.duration_s, sc.fs, sc.seed)


@dataclass
class ModeResult:
    mode: str
    outputs: list          # per node, on the reference clock
    run: NW.NetworkRun | None = None


def scoring_windows(n_samples: int, cfg: dsp.WolaConfig, mcfg: C.MetricsConfig, fs: float):
    """(start, stop) of the segmental-SNR window and of the final window.

    The last 2N samples are left out; no complete frame covers them.
    """
    stop = n_samples - 2 * cfg.N
    start = mcfg.skip_frames * cfg.Ns
    final = (max(start, stop - int(round(mcfg.final_window_s * fs))), stop)
    return (start, stop), final


def run_mode(scene: SC.RenderedScene, mode: str, exp: C.ExperimentConfig,
             centralized: ModeResult | None = None) -> ModeResult:
    cfg = exp.processing.wola()
    if mode == "centralized":
        if centralized is not None:
            return centralized
        cen = G.centralized_enhance(scene.synchronized(), cfg, exp.processing.beta)
        return ModeResult(mode, cen.estimates)
    run = NW.run_network(scene, mode, cfg, exp.processing.network_options())
    outs = [M.to_reference_clock(sig, 0.0 if mode == "sync-danse" else nd.sro_ppm)
            for sig, nd in zip(run.outputs, scene.scenario.nodes)]
    return ModeResult(mode, outs, run)


def run_experiment(exp: C.ExperimentConfig, modes, sro_set: str = "custom", seed: int | None = None,
                   out_dir=None, export_signals: bool = False, export_traces: bool = False,
                   scene: SC.RenderedScene | None = None) -> tuple[MetricsReport, dict]:
    """Render the scene once, run every mode and score each node.

    Returns the report and the per-mode results. With `out_dir` the report
    (metrics.json, metrics.csv) and optionally WAVs and SRO traces are
    written there.
    """
    modes = list(dict.fromkeys(modes))
    for m in modes:
        if m not in NW.MODES:
            raise ValueError(f"unknown mode {m!r}; expected one of {NW.MODES}")
    sc = prepare_scenario(exp, sro_set, seed)
    if scene is None:
        scene = SC.render_scene(sc, load_speech(sc), exp.processing.wola())
    cfg = exp.processing.wola()
    fs = sc.fs

    cen = run_mode(scene, "centralized", exp)
    results = {}
    for m in modes:
        log.info("running %s", m)
        results[m] = run_mode(scene, m, exp, cen)

    n = sc.n_samples
    (s0, s1), (f0, f1) = scoring_windows(n, cfg, exp.metrics, fs)
    per_node = {}
    for k, nd in enumerate(sc.nodes):
        clean = scene.desired_reference[k].samples[nd.ref_mic]
        noisy = scene.per_node_reference[k].samples[nd.ref_mic]
        entry = {"n_mics": nd.n_mics, "sro_ppm": nd.sro_ppm,
                 "input_segsnr_db": _finite(M.segmental_snr(noisy[s0:s1], clean[s0:s1], fs)),
                 "modes": {}}
        for m, res in results.items():
            est = res.outputs[k].samples
            entry["modes"][m] = {
                "output_segsnr_db": _finite(M.segmental_snr(est[s0:s1], clean[s0:s1], fs)),
                "oracle_distance_db": _finite(M.oracle_distance(est, cen.outputs[k].samples, f0, f1)),
            }
        per_node[str(k + 1)] = entry

    traces, fsd = {}, {}
    for m, res in results.items():
        if res.run is None or m not in ("async-sro", "async-sro-fsd"):
            continue
        run = res.run
        for k in range(len(sc.nodes)):
            for q in range(len(sc.nodes)):
                if q == k:
                    continue
                pair = f"{m}:{k + 1}-{q + 1}"
                frames = range(1, int(run.n_frames[k]) + 1)
                traces[pair] = [(i, run.eps_hat[k, q, i] * 1e6, run.tau_hat[k, q, i],
                                 int(run.fsd_event[k, q, i])) for i in frames]
                fsd[pair] = [[round(t, 6), e] for t, e in run.fsd_times(k, q)]

    meta = {"seed": sc.seed, "fs": fs, "duration_s": sc.duration_s, "sro_set": sro_set,
            "sro_ppm": [nd.sro_ppm for nd in sc.nodes], "modes": modes,
            "frame_length": cfg.N, "hop": cfg.Ns, "beta": exp.processing.beta,
            "ld": exp.processing.ld, "alpha": exp.processing.alpha,
            "drift_model": exp.processing.drift_model,
            "segsnr_window": [s0, s1], "final_window": [f0, f1],
            "speech": sc.speech_wav or "synthetic"}
    report = MetricsReport(per_node, traces, fsd, meta)
    if out_dir is not None:
        write_outputs(report, results, Path(out_dir), export_signals, export_traces)
    return report, results


def write_wav(path: Path, x: np.ndarray, fs: float) -> float:
    """Write a float32 WAV with peak at most 1; returns the gain applied."""
    x = np.asarray(x, dtype=float)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    gain = 1.0 if peak <= 1.0 else 1.0 / peak
    y = (x * gain).astype(np.float32)
    y = np.clip(y, -1.0, 1.0)
    wavfile.write(str(path), int(round(fs)), y)
    return gain


def write_outputs(report: MetricsReport, results: dict, out_dir: Path,
                  export_signals: bool, export_traces: bool):
    out_dir.mkdir(parents=True, exist_ok=True)
    if export_signals:
        gains = {}
        fs = report.run_meta["fs"]
        for m, res in results.items():
            for k, sig in enumerate(res.outputs):
                name = f"node{k + 1}_{m}.wav"
                gains[name] = write_wav(out_dir / name, sig.samples, fs)
        report.run_meta["wav_gain"] = gains
    (out_dir / "metrics.json").write_text(report.to_json())
    (out_dir / "metrics.csv").write_text(report.to_csv())
    if export_traces:
        (out_dir / "sro_trace.csv").write_text(report.trace_csv())
