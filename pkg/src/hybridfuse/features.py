"""MFCC, LFCC and CQCC front ends (20 static coefficients + deltas + delta-deltas)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .dsp import Waveform

KINDS = ("mfcc", "lfcc", "cqcc")


@dataclass(frozen=True)
class SpectralConfig:
    kind: str = "mfcc"
    n_coeffs: int = 20
    n_filters: int = 20
    bins_per_octave: int = 96
    win_ms: float = dsp.DEFAULT_WIN_MS
    hop_ms: float = dsp.DEFAULT_HOP_MS
    preemph: float = dsp.DEFAULT_PREEMPHASIS
    with_deltas: bool = True
    delta_reach: int = 2
    n_linear: int = 128

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}; expected one of {KINDS}")
        if kind in ("mfcc", "lfcc") and self.n_coeffs > self.n_filters:
            raise ValueError(f"n_coeffs ({self.n_coeffs}) must not exceed n_filters ({self.n_filters})")
        if kind == "cqcc" and self.n_coeffs > self.n_linear:
            raise ValueError(f"n_coeffs ({self.n_coeffs}) must not exceed n_linear ({self.n_linear})")

    @property
    def dim(self) -> int:
        return self.n_coeffs * 3 if self.with_deltas else self.n_coeffs


@dataclass
class FeatureMatrix:
    data: np.ndarray
    stream: str
    frame_rate: float
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.stream not in ("SF", "SSL"):
            raise ValueError(f"stream must be 'SF' or 'SSL', got {self.stream!r}")
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"feature matrix must be T x D with T, D >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature matrix contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def _with_deltas(static: np.ndarray, cfg: SpectralConfig) -> np.ndarray:
    if not cfg.with_deltas:
        return static
    d1 = dsp.delta(static, cfg.delta_reach)
    d2 = dsp.delta(d1, cfg.delta_reach)
    return np.concatenate([static, d1, d2], axis=1)


def _framing(w: Waveform, cfg: SpectralConfig) -> tuple[int, int, int]:
    win = dsp.ms_to_samples(cfg.win_ms, w.sample_rate)
    hop = dsp.ms_to_samples(cfg.hop_ms, w.sample_rate)
    return win, hop, dsp.next_pow2(win)


def _filterbank_cepstra(w: Waveform, cfg: SpectralConfig, scale: str) -> np.ndarray:
    win, hop, n_fft = _framing(w, cfg)
    emphasized = dsp.preemphasize(w, cfg.preemph)
    grid = dsp.frame_and_window(emphasized, win, hop, "hamming")
    power = dsp.dft(grid.frames, n_fft).power_spectrum
    fb = dsp.triangular_filterbank(scale, cfg.n_filters, n_fft, w.sample_rate)
    energies = power @ fb.T
    log_e = np.log(np.maximum(energies, dsp.LOG_FLOOR))
    return _with_deltas(dsp.dct2_ortho(log_e, cfg.n_coeffs), cfg)


def _check_kind(cfg: SpectralConfig, kind: str):
    if cfg.kind != kind:
        raise ValueError(f"config kind is {cfg.kind!r}, expected {kind!r}")


def extract_mfcc(w: Waveform, cfg: SpectralConfig | None = None) -> FeatureMatrix:
    cfg = cfg or SpectralConfig("mfcc")
    _check_kind(cfg, "mfcc")
    data = _filterbank_cepstra(w, cfg, "mel")
    return FeatureMatrix(data, "SF", 1000.0 / cfg.hop_ms, "mfcc")


def extract_lfcc(w: Waveform, cfg: SpectralConfig | None = None) -> FeatureMatrix:
    cfg = cfg or SpectralConfig("lfcc")
    _check_kind(cfg, "lfcc")
    data = _filterbank_cepstra(w, cfg, "linear")
    return FeatureMatrix(data, "SF", 1000.0 / cfg.hop_ms, "lfcc")


def extract_cqcc(w: Waveform, cfg: SpectralConfig | None = None) -> FeatureMatrix:
    """CQT power, log, uniform resampling of the geometric axis, DCT, deltas."""
    cfg = cfg or SpectralConfig("cqcc")
    _check_kind(cfg, "cqcc")
    win, hop, _ = _framing(w, cfg)
    emphasized = dsp.preemphasize(w, cfg.preemph)
    f_min, f_max = dsp.cqt_default_range(w.sample_rate)
    mag = dsp.cqt(emphasized, cfg.bins_per_octave, f_min, f_max, hop=hop, win_len=win)
    log_p = np.log(np.maximum(mag**2, dsp.LOG_FLOOR))

    geo = dsp.cqt_frequencies(cfg.bins_per_octave, f_min, f_max)
    lin = np.linspace(geo[0], geo[-1], cfg.n_linear)
    resampled = np.empty((log_p.shape[0], cfg.n_linear))
    for t in range(log_p.shape[0]):
        resampled[t] = np.interp(lin, geo, log_p[t])
    data = _with_deltas(dsp.dct2_ortho(resampled, cfg.n_coeffs), cfg)
    return FeatureMatrix(data, "SF", 1000.0 / cfg.hop_ms, "cqcc")


_EXTRACTORS = {"mfcc": extract_mfcc, "lfcc": extract_lfcc, "cqcc": extract_cqcc}


def extract(w: Waveform, cfg: SpectralConfig, source: str = "") -> FeatureMatrix:
    try:
        fn = _EXTRACTORS[cfg.kind]
    except KeyError:
        raise ValueError(f"unknown feature kind {cfg.kind!r}") from None
    fm = fn(w, cfg)
    fm.provenance = f"{cfg.kind}:{source}" if source else cfg.kind
    return fm
