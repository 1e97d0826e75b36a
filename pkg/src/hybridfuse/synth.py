"""Synthetic bona fide / spoof corpus and a stand-in SSL feature stream.

Bona fide clips are vibrato harmonic tones with a syllabic envelope and a
noise floor. Spoof clips render the same base with three artifacts: a
random phase jump in every partial every 50 ms, amplitudes quantised to
6 dB steps, and a deep notch over 3.5-4 kHz.

The pseudo-SSL stream is a fixed random projection of log mel energies
on a 20 ms clock. It carries real signal information but is only a
shape-compatible stand-in for a pretrained encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data_io, dsp
from .dsp import Waveform
from .features import FeatureMatrix

log = logging.getLogger(__name__)

SSL_T = 201
SSL_D = 1024
SSL_N_MELS = 40
SSL_SEED = 0

PHASE_JUMP_S = 0.050
NOTCH_HZ = (3500.0, 4000.0)
NOTCH_DEPTH_DB = 60.0
QUANT_STEP_DB = 6.0


@dataclass(frozen=True)
class SynthRecipe:
    seed: int
    label: str = "bonafide"
    f0_min: float = 90.0
    f0_max: float = 250.0
    max_partial_hz: float = 7600.0
    noise_db: float = -45.0

    def __post_init__(self):
        if self.label not in data_io.LABELS:
            raise ValueError(f"label must be one of {data_io.LABELS}, got {self.label!r}")

    def encode(self) -> str:
        return f"synth:seed={self.seed},label={self.label},noise_db={self.noise_db!r}"

    @classmethod
    def decode(cls, text: str) -> SynthRecipe:
        if not text.startswith("synth:"):
            raise ValueError(f"not a synth recipe: {text!r}")
        fields = dict(kv.split("=", 1) for kv in text[len("synth:") :].split(",") if kv)
        return cls(int(fields["seed"]), fields.get("label", "bonafide"), noise_db=float(fields.get("noise_db", -45.0)))


@dataclass(frozen=True)
class _Base:
    f0: float
    vib_rate: float
    vib_depth: float
    vib_phase: float
    amps: np.ndarray
    phases: np.ndarray
    env_rate: float
    env_phase: float
    noise: np.ndarray


def _draw_base(r: SynthRecipe, n: int) -> _Base:
    rng = np.random.default_rng([r.seed, 0])
    f0 = rng.uniform(r.f0_min, r.f0_max)
    vib_depth = rng.uniform(0.01, 0.03)
    n_partials = int(r.max_partial_hz // (f0 * (1.0 + vib_depth)))
    k = np.arange(1, n_partials + 1)
    tilt = rng.uniform(0.6, 1.2)
    amps = k**-tilt * np.exp(rng.normal(0.0, 0.3, n_partials))
    return _Base(
        f0=f0,
        vib_rate=rng.uniform(4.0, 6.0),
        vib_depth=vib_depth,
        vib_phase=rng.uniform(0, 2 * np.pi),
        amps=amps,
        phases=rng.uniform(0, 2 * np.pi, n_partials),
        env_rate=rng.uniform(2.0, 4.0),
        env_phase=rng.uniform(0, 2 * np.pi),
        noise=rng.standard_normal(n),
    )


def _render(base: _Base, n: int, sr: int, amps: np.ndarray, phase_offsets=None) -> np.ndarray:
    t = np.arange(n) / sr
    f0_t = base.f0 * (1.0 + base.vib_depth * np.sin(2 * np.pi * base.vib_rate * t + base.vib_phase))
    theta = 2 * np.pi * np.cumsum(f0_t) / sr
    out = np.zeros(n)
    for i, a in enumerate(amps):
        ph = base.phases[i] if phase_offsets is None else base.phases[i] + phase_offsets[i]
        out += a * np.sin((i + 1) * theta + ph)
    env = 0.65 + 0.35 * np.sin(2 * np.pi * base.env_rate * t + base.env_phase)
    return out * env


def _quantize_db(amps: np.ndarray, step_db: float) -> np.ndarray:
    db = 20.0 * np.log10(amps)
    return 10.0 ** (np.round(db / step_db) * step_db / 20.0)


def _notch(x: np.ndarray, sr: int, band: tuple[float, float], depth_db: float) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / sr)
    spec[(freqs >= band[0]) & (freqs <= band[1])] *= 10.0 ** (-depth_db / 20.0)
    return np.fft.irfft(spec, n=len(x))


def synth_clip(r: SynthRecipe, length: int = dsp.DEFAULT_NUM_SAMPLES, sr: int = dsp.DEFAULT_SAMPLE_RATE) -> Waveform:
    base = _draw_base(r, length)
    clean = _render(base, length, sr, base.amps)
    gain = 0.08 / np.sqrt(np.mean(clean**2))
    noise = base.noise * 10.0 ** (r.noise_db / 20.0)
    if r.label == "bonafide":
        return Waveform(gain * clean + noise, sr)

    art = np.random.default_rng([r.seed, 1])
    n_seg = int(np.ceil(length / (PHASE_JUMP_S * sr)))
    jumps = art.uniform(-np.pi, np.pi, (len(base.amps), n_seg))
    jumps[:, 0] = 0.0
    seg = (np.arange(length) // int(round(PHASE_JUMP_S * sr))).astype(int)
    offsets = jumps[:, seg]
    spoof = _render(base, length, sr, _quantize_db(base.amps, QUANT_STEP_DB), offsets)
    return Waveform(_notch(gain * spoof + noise, sr, NOTCH_HZ, NOTCH_DEPTH_DB), sr)


def band_energy(w: Waveform, band: tuple[float, float] = NOTCH_HZ) -> float:
    spec = np.abs(np.fft.rfft(w.samples)) ** 2
    freqs = np.fft.rfftfreq(len(w), 1.0 / w.sample_rate)
    return float(spec[(freqs >= band[0]) & (freqs <= band[1])].sum())


# ---------------------------------------------------------------------------
# pseudo-SSL stream
# ---------------------------------------------------------------------------


def _ssl_projection(seed: int, n_in: int, n_out: int) -> np.ndarray:
    return np.random.default_rng([seed, 7]).standard_normal((n_in, n_out)) / np.sqrt(n_in)


def synth_ssl_features(
    w: Waveform, target_T: int = SSL_T, target_D: int = SSL_D, seed: int = SSL_SEED
) -> FeatureMatrix:
    """Random projection of 40 log mel energies (25 ms window, 20 ms hop)."""
    win = dsp.ms_to_samples(25.0, w.sample_rate)
    hop = dsp.ms_to_samples(20.0, w.sample_rate)
    n_fft = dsp.next_pow2(win)
    grid = dsp.frame_and_window(w, win, hop, "hamming")
    fb = dsp.triangular_filterbank("mel", SSL_N_MELS, n_fft, w.sample_rate)
    log_e = np.log(np.maximum(dsp.dft(grid.frames, n_fft).power_spectrum @ fb.T, dsp.LOG_FLOOR))
    if log_e.shape[0] >= target_T:
        log_e = log_e[:target_T]
    else:
        log_e = np.concatenate([log_e, np.repeat(log_e[-1:], target_T - log_e.shape[0], axis=0)])
    z = (log_e + 5.0) / 5.0
    data = z @ _ssl_projection(seed, SSL_N_MELS, target_D)
    return FeatureMatrix(data, "SSL", w.sample_rate / hop, f"pseudo-ssl:seed={seed}")


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def corpus_recipes(n_train: int, n_eval: int, seed: int) -> tuple[list[tuple[str, SynthRecipe, str]], list[tuple[str, SynthRecipe, str]]]:
    """(utt_id, recipe, dataset_tag) per clip; train and eval seeds never overlap."""
    rng = np.random.default_rng(seed)
    base = int(seed) * 1_000_000
    train = []
    for i in range(n_train):
        label = data_io.LABELS[i % 2]
        r = SynthRecipe(base + i, label, noise_db=round(float(rng.uniform(-50.0, -35.0)), 3))
        train.append((f"train_{i:05d}", r, "train"))
    evals = []
    for j in range(n_eval):
        label = data_io.LABELS[j % 2]
        # eval-a: quiet noise floor, eval-b: loud
        tag = "eval-a" if (j // 2) % 2 == 0 else "eval-b"
        lo, hi = (-50.0, -45.0) if tag == "eval-a" else (-40.0, -35.0)
        r = SynthRecipe(base + n_train + j, label, noise_db=round(float(rng.uniform(lo, hi)), 3))
        evals.append((f"eval_{j:05d}", r, tag))
    return train, evals


def render_entry(recipe: SynthRecipe, length: int, sr: int) -> Waveform:
    """Synthesize and pass through 16-bit quantisation, as stored on disk."""
    w = synth_clip(recipe, length, sr)
    return Waveform(data_io.quantize_pcm16(w.samples) / 32768.0, sr)


def generate_corpus(
    out_dir,
    n_train: int = 200,
    n_eval: int = 100,
    seed: int = 42,
    length: int = dsp.DEFAULT_NUM_SAMPLES,
    sr: int = dsp.DEFAULT_SAMPLE_RATE,
) -> tuple[data_io.Manifest, data_io.Manifest]:
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
        (out / "ssl").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create corpus directory {out}: {e}") from None

    manifests = []
    for name, items in zip(("train", "eval"), corpus_recipes(n_train, n_eval, seed)):
        entries = []
        for utt, recipe, tag in items:
            w = render_entry(recipe, length, sr)
            data_io.write_wav(out / "wav" / f"{utt}.wav", w)
            data_io.write_features(out / "ssl" / f"{utt}.sff", synth_ssl_features(w).data)
            entries.append(data_io.ManifestEntry(utt, f"wav/{utt}.wav", f"ssl/{utt}.sff", recipe.label, tag))
        m = data_io.Manifest(entries, out)
        data_io.write_manifest(out / f"{name}.tsv", m)
        manifests.append(m)
        log.info("wrote %d %s clips to %s", len(entries), name, out)
    return manifests[0], manifests[1]


def clip_for_entry(entry: data_io.ManifestEntry, manifest: data_io.Manifest, length: int, sr: int) -> Waveform:
    if entry.source.startswith("synth:"):
        return render_entry(SynthRecipe.decode(entry.source), length, sr)
    return data_io.read_wav(manifest.resolve(entry.source))


def recipe_with_label(r: SynthRecipe, label: str) -> SynthRecipe:
    return replace(r, label=label)
