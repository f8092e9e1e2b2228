"""Experiment configuration files (TOML).

Schema::

    [scenario]
    room_dims = [5.0, 5.0, 5.0]     # metres
    absorption = 0.9
    t60_s = 0.15                    # optional; sets the wall reflection
    fs = 16000
    duration_s = 15.0
    snr_db = -3.0
    rir_length = 4096
    seed = 0
    jitter_m = 0.05
    vad_threshold = 1e-3
    speech_wav = "speech.wav"       # optional; relative to the config file

    [[nodes]]                       # node 1 first, it is the reference clock
    centre = [1.0, 4.0, 1.5]        # linear array ...
    n_mics = 1
    spacing = 0.2
    axis = [1.0, 0.0, 0.0]
    # mic_positions = [[x, y, z], ...]   ... or explicit positions
    sro_ppm = 0.0
    ref_mic = 0

    [[sources]]
    kind = "speech"                 # exactly one; the rest are "noise"
    position = [2.0, 2.2, 1.5]

    [processing]
    frame_length = 1024
    beta = 0.978
    update_period = 30
    ld = 10
    alpha = 0.95
    search_half_width_ppm = 1000.0
    drift_model = "anchored"

    [metrics]
    skip_frames = 15
    final_window_s = 5.0
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dsp
from . import gevd as G
from . import network as NW
from . import scene as SC
from . import sro as SR

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration; the message carries the file and line where known."""


_SCENARIO_KEYS = {"room_dims", "absorption", "t60_s", "fs", "duration_s", "snr_db", "rir_length",
                  "seed", "jitter_m", "vad_threshold", "speech_wav"}
_NODE_KEYS = {"centre", "n_mics", "spacing", "axis", "mic_positions", "sro_ppm", "ref_mic"}
_SOURCE_KEYS = {"kind", "position"}
_SECTIONS = {"scenario", "nodes", "sources", "processing", "metrics"}


@dataclass
class ProcessingConfig:
    frame_length: int = 1024
    beta: float = G.DEFAULT_BETA
    update_period: int = 30
    ld: int = SR.DEFAULT_LD
    alpha: float = SR.DEFAULT_ALPHA
    search_half_width_ppm: float = SR.DEFAULT_SEARCH_PPM
    drift_model: str = "anchored"

    def wola(self) -> dsp.WolaConfig:
        return dsp.WolaConfig.sqrt_hann(self.frame_length)

    def network_options(self) -> NW.NetworkOptions:
        return NW.NetworkOptions(beta=self.beta, update_period=self.update_period, ld=self.ld,
                                 alpha=self.alpha, search_half_width_ppm=self.search_half_width_ppm,
                                 drift_model=self.drift_model)


@dataclass
class MetricsConfig:
    skip_frames: int = 15
    final_window_s: float = 5.0


@dataclass
class ExperimentConfig:
    scenario: SC.Scenario
    processing: ProcessingConfig = field(default_factory=ProcessingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    path: Path | None = None


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=|^\s*\[\[?\s*{re.escape(key)}\s*\]\]?", re.M)
    m = pat.search(text)
    return text.count("\n", 0, m.start()) + 1 if m else None


class _Checker:
    def __init__(self, text: str, origin: str):
        self.text = text
        self.origin = origin

    def fail(self, key: str, msg: str):
        line = _line_of(self.text, key)
        where = f"{self.origin}:{line}" if line else self.origin
        raise ConfigError(f"{where}: {msg}")

    def unknown(self, table: dict, allowed: set, section: str):
        extra = sorted(set(table) - allowed)
        if extra:
            self.fail(extra[0], f"unknown key {extra[0]!r} in [{section}]")

    def number(self, table: dict, key: str, default=None, kind=float):
        if key not in table:
            if default is None:
                self.fail(key, f"missing required key {key!r}")
            return default
        v = table[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(key, f"{key!r} must be a number, got {v!r}")
        if kind is int and int(v) != v:
            self.fail(key, f"{key!r} must be an integer, got {v!r}")
        return kind(v)

    def vector(self, table: dict, key: str, length: int | None = 3):
        v = table.get(key)
        try:
            arr = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            arr = None
        if arr is None or arr.ndim == 0 or (length is not None and arr.shape[-1] != length):
            self.fail(key, f"{key!r} must be a list of {length} numbers, got {v!r}")
        return arr


def _node(chk: _Checker, tbl: dict) -> SC.NodeSpec:
    chk.unknown(tbl, _NODE_KEYS, "nodes")
    sro = chk.number(tbl, "sro_ppm", 0.0)
    ref = chk.number(tbl, "ref_mic", 0, int)
    if "mic_positions" in tbl:
        pos = chk.vector(tbl, "mic_positions")
        if pos.ndim != 2:
            chk.fail("mic_positions", "mic_positions must be a list of [x, y, z] triples")
        return SC.NodeSpec(pos, sro, ref)
    if "centre" not in tbl:
        chk.fail("nodes", "each node needs either 'mic_positions' or 'centre'")
    nd = SC.NodeSpec.linear_array(chk.vector(tbl, "centre"), chk.number(tbl, "n_mics", 1, int),
                                  chk.number(tbl, "spacing", 0.2), sro,
                                  chk.vector(tbl, "axis") if "axis" in tbl else (1.0, 0.0, 0.0))
    nd.ref_mic = ref
    return nd


def parse_config(text: str, origin: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    """Build an experiment from TOML text; errors name the offending line."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    chk = _Checker(text, origin)
    chk.unknown(raw, _SECTIONS, "top level")
    sc_tbl = raw.get("scenario", {})
    chk.unknown(sc_tbl, _SCENARIO_KEYS, "scenario")
    if not raw.get("nodes"):
        chk.fail("nodes", "at least one [[nodes]] entry is required")
    if not raw.get("sources"):
        chk.fail("sources", "[[sources]] entries are required")
    nodes = [_node(chk, t) for t in raw["nodes"]]
    sources = []
    for t in raw["sources"]:
        chk.unknown(t, _SOURCE_KEYS, "sources")
        kind = t.get("kind", "noise")
        if kind not in ("speech", "noise"):
            chk.fail("kind", f"source kind must be 'speech' or 'noise', got {kind!r}")
        sources.append(SC.SourceSpec(chk.vector(t, "position"), kind))

    wav = sc_tbl.get("speech_wav")
    if wav is not None:
        wav_path = Path(wav)
        if not wav_path.is_absolute() and base_dir is not None:
            wav_path = base_dir / wav_path
        if not wav_path.is_file():
            chk.fail("speech_wav", f"speech file {str(wav_path)!r} not found")
        wav = str(wav_path)
    t60 = sc_tbl.get("t60_s")
    try:
        scenario = SC.Scenario(
            room_dims=chk.vector(sc_tbl, "room_dims"),
            absorption=chk.number(sc_tbl, "absorption"),
            nodes=nodes, sources=sources,
            fs=chk.number(sc_tbl, "fs", 16000.0),
            snr_db=chk.number(sc_tbl, "snr_db", -3.0),
            duration_s=chk.number(sc_tbl, "duration_s", 15.0),
            rir_length=chk.number(sc_tbl, "rir_length", 4096, int),
            seed=chk.number(sc_tbl, "seed", 0, int),
            jitter_m=chk.number(sc_tbl, "jitter_m", SC.DEFAULT_JITTER_M),
            vad_threshold=chk.number(sc_tbl, "vad_threshold", SC.DEFAULT_VAD_THRESHOLD),
            speech_wav=wav,
            t60_s=None if t60 is None else chk.number(sc_tbl, "t60_s"),
        )
    except SC.SceneError as exc:
        raise ConfigError(f"{origin}: {exc}") from None

    sections = {}
    for name, cls in (("processing", ProcessingConfig), ("metrics", MetricsConfig)):
        tbl = raw.get(name, {})
        spec = {f.name: f for f in fields(cls)}
        chk.unknown(tbl, set(spec), name)
        kw = {}
        for key, val in tbl.items():
            default = spec[key].default
            if isinstance(default, str):
                if not isinstance(val, str):
                    chk.fail(key, f"{key!r} must be a string")
                kw[key] = val
            else:
                kw[key] = chk.number(tbl, key, kind=type(default))
        sections[name] = cls(**kw)
    proc = sections["processing"]
    if proc.drift_model not in SR.DRIFT_MODELS:
        chk.fail("drift_model", f"drift_model must be one of {SR.DRIFT_MODELS}")
    if not 0.0 < proc.beta < 1.0:
        chk.fail("beta", "beta must lie in (0, 1)")
    try:
        proc.wola()
    except dsp.InvalidConfigError as exc:
        chk.fail("frame_length", f"frame_length: {exc}")
    return ExperimentConfig(scenario, proc, sections["metrics"], None)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    cfg = parse_config(path.read_text(), str(path), path.parent)
    cfg.path = path
    return cfg
