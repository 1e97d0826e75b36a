"""Signal-processing primitives shared by the cepstral front ends."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.fft

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_NUM_SAMPLES = 64600
DEFAULT_PREEMPHASIS = 0.97
DEFAULT_WIN_MS = 25.0
DEFAULT_HOP_MS = 10.0
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrameGrid:
    frames: np.ndarray
    win_len: int
    hop: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Spectrum:
    """One-sided DFT of a real frame (fft_size // 2 + 1 bins)."""

    bins: np.ndarray
    fft_size: int

    @property
    def power_spectrum(self) -> np.ndarray:
        return self.bins.real**2 + self.bins.imag**2


def ms_to_samples(ms: float, sample_rate: int) -> int:
    return int(round(ms * 1e-3 * sample_rate))


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def preemphasize(w: Waveform, coeff: float = DEFAULT_PREEMPHASIS) -> Waveform:
    """First-order high-pass: y[0] = x[0], y[n] = x[n] - coeff * x[n-1]."""
    if len(w) == 0:
        raise ValueError("empty waveform")
    if not 0.0 <= coeff < 1.0:
        raise ValueError(f"pre-emphasis coefficient must lie in [0, 1), got {coeff}")
    x = w.samples
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - coeff * x[:-1]
    return Waveform(y, w.sample_rate)


def canonicalize_length(w: Waveform, target_len: int = DEFAULT_NUM_SAMPLES) -> Waveform:
    """Truncate to the first ``target_len`` samples or zero-pad at the end."""
    if target_len <= 0:
        raise ValueError(f"target_len must be positive, got {target_len}")
    x = w.samples
    if len(x) >= target_len:
        return Waveform(x[:target_len].copy(), w.sample_rate)
    out = np.zeros(target_len)
    out[: len(x)] = x
    return Waveform(out, w.sample_rate)


def hamming(n: int) -> np.ndarray:
    """Symmetric Hamming window, 0.54 - 0.46 cos(2 pi k / (n - 1))."""
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def num_frames(num_samples: int, win_len: int, hop: int) -> int:
    return 1 + (num_samples - win_len) // hop


def frame_and_window(w: Waveform, win_len: int, hop: int, window: str = "hamming") -> FrameGrid:
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if win_len < 1:
        raise ValueError(f"win_len must be >= 1, got {win_len}")
    if win_len > len(w):
        raise ValueError(f"signal shorter than window ({len(w)} < {win_len} samples)")
    if window == "hamming":
        win = hamming(win_len)
    elif window == "rectangular":
        win = np.ones(win_len)
    else:
        raise ValueError(f"unknown window {window!r}")
    view = np.lib.stride_tricks.sliding_window_view(w.samples, win_len)[::hop]
    return FrameGrid(view * win, win_len, hop)


def dft(frame: np.ndarray, fft_size: int) -> Spectrum:
    """One-sided DFT of a real frame, zero-padded to ``fft_size``.

    Also accepts a 2-D stack of frames (one per row).
    """
    if not _is_pow2(fft_size):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] > fft_size:
        raise ValueError(f"frame length {frame.shape[-1]} exceeds fft_size {fft_size}")
    return Spectrum(np.fft.rfft(frame, n=fft_size, axis=-1), fft_size)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def triangular_filterbank(
    scale: str,
    n_filters: int,
    fft_size: int,
    sample_rate: int,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> np.ndarray:
    """Triangular filters on FFT bins, centers equally spaced on ``scale``.

    Edge and center frequencies are snapped to the nearest FFT bin so every
    filter peaks at exactly 1 on its center bin and falls to 0 on the
    neighbouring centers.

    Returns:
        array of shape (n_filters, fft_size // 2 + 1)
    """
    if n_filters < 1:
        raise ValueError("n_filters must be >= 1")
    nyquist = sample_rate / 2.0
    if f_max is None:
        f_max = nyquist
    if f_max > nyquist:
        raise ValueError(f"f_max {f_max} Hz exceeds Nyquist {nyquist} Hz")
    if not 0.0 <= f_min < f_max:
        raise ValueError(f"need 0 <= f_min < f_max, got {f_min}, {f_max}")

    if scale == "mel":
        edges_hz = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2))
    elif scale == "linear":
        edges_hz = np.linspace(f_min, f_max, n_filters + 2)
    else:
        raise ValueError(f"unknown filterbank scale {scale!r}")

    n_bins = fft_size // 2 + 1
    edges = np.rint(edges_hz * fft_size / sample_rate).astype(int)
    edges = np.clip(edges, 0, n_bins - 1)
    k = np.arange(n_bins)
    fb = np.zeros((n_filters, n_bins))
    for i in range(n_filters):
        lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
        if c > lo:
            rise = (k >= lo) & (k <= c)
            fb[i, rise] = (k[rise] - lo) / (c - lo)
        if hi > c:
            fall = (k >= c) & (k <= hi)
            fb[i, fall] = (hi - k[fall]) / (hi - c)
        fb[i, c] = 1.0
    return fb


def cqt_quality(bins_per_octave: int) -> float:
    return 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)


def cqt_frequencies(bins_per_octave: int, f_min: float, f_max: float) -> np.ndarray:
    n_bins = int(np.floor(bins_per_octave * np.log2(f_max / f_min) + 1e-9))
    n_bins = max(n_bins, 1)
    return f_min * 2.0 ** (np.arange(n_bins) / bins_per_octave)


def cqt_default_range(sample_rate: int) -> tuple[float, float]:
    """Seven octaves below Nyquist; the lowest kernel fits a 4 s clip at 16 kHz."""
    f_max = sample_rate / 2.0
    return f_max / 2.0**7, f_max


def cqt_kernel_lengths(freqs: np.ndarray, bins_per_octave: int, sample_rate: int) -> np.ndarray:
    q = cqt_quality(bins_per_octave)
    return np.ceil(q * sample_rate / freqs).astype(int)


@functools.lru_cache(maxsize=4)
def _cqt_kernel_blocks(sr: int, bins_per_octave: int, f_min: float, f_max: float, block: int):
    """Real/imaginary kernel columns per block of bins, centred in the longest kernel's span."""
    freqs = cqt_frequencies(bins_per_octave, f_min, f_max)
    lengths = cqt_kernel_lengths(freqs, bins_per_octave, sr)
    half = int(lengths[0]) // 2
    blocks = []
    for b0 in range(0, len(freqs), block):
        idx = np.arange(b0, min(b0 + block, len(freqs)))
        width = int(lengths[idx[0]])
        kern = np.zeros((width, 2 * len(idx)))
        for j, k in enumerate(idx):
            n_k = int(lengths[k])
            n = np.arange(n_k)
            start = width // 2 - n_k // 2
            env = hamming(n_k) / n_k
            phase = 2.0 * np.pi * freqs[k] * n / sr
            kern[start : start + n_k, 2 * j] = env * np.cos(phase)
            kern[start : start + n_k, 2 * j + 1] = -env * np.sin(phase)
        kern.setflags(write=False)
        blocks.append((idx, half - width // 2, kern))
    return tuple(blocks)


def cqt(
    w: Waveform,
    bins_per_octave: int = 96,
    f_min: float | None = None,
    f_max: float | None = None,
    hop: int = 160,
    win_len: int = 400,
    block: int = 24,
) -> np.ndarray:
    """Constant-Q magnitude by direct correlation with windowed exponentials.

    Frame ``t`` is centred on sample ``t * hop + win_len // 2`` so the CQT
    shares its clock with the STFT front ends. Samples outside the signal
    count as zero.

    Bins are processed in blocks of ``block`` neighbours; each block is a
    single matrix product of the frame segments with the block's kernels
    zero-padded to the longest one, which leaves each dot product
    unchanged.

    Returns:
        array of shape (n_frames, n_bins)
    """
    sr = w.sample_rate
    d_min, d_max = cqt_default_range(sr)
    f_min = d_min if f_min is None else f_min
    f_max = d_max if f_max is None else f_max
    if bins_per_octave < 1:
        raise ValueError("bins_per_octave must be >= 1")
    if not 0 < f_min < f_max <= sr / 2.0:
        raise ValueError(f"need 0 < f_min < f_max <= Nyquist, got {f_min}, {f_max}")

    freqs = cqt_frequencies(bins_per_octave, f_min, f_max)
    lengths = cqt_kernel_lengths(freqs, bins_per_octave, sr)
    x = w.samples
    if lengths[0] > len(x):
        raise ValueError(
            f"f_min too low for signal length: kernel of {lengths[0]} samples "
            f"at {f_min:.2f} Hz exceeds {len(x)} samples"
        )
    n_frames = num_frames(len(x), win_len, hop)
    if n_frames < 1:
        raise ValueError(f"signal shorter than window ({len(x)} < {win_len} samples)")
    centers = np.arange(n_frames) * hop + win_len // 2

    # segment j spans [c - half, c - half + span) around every center
    span = int(lengths[0])
    half = span // 2
    pad_lo = half
    pad_hi = span
    padded = np.concatenate([np.zeros(pad_lo), x, np.zeros(pad_hi)])
    starts = centers - half + pad_lo
    segments = np.lib.stride_tricks.sliding_window_view(padded, span)[starts]

    out = np.empty((n_frames, len(freqs)))
    for idx, off, kern in _cqt_kernel_blocks(sr, bins_per_octave, float(f_min), float(f_max), block):
        prod = segments[:, off : off + kern.shape[0]] @ kern
        out[:, idx] = np.hypot(prod[:, 0::2], prod[:, 1::2])
    return out


def cqt_reference(
    w: Waveform,
    bins_per_octave: int = 96,
    f_min: float | None = None,
    f_max: float | None = None,
    hop: int = 160,
    win_len: int = 400,
) -> np.ndarray:
    """Bin-by-bin, frame-by-frame CQT; slow, kept as a cross-check for :func:`cqt`."""
    sr = w.sample_rate
    d_min, d_max = cqt_default_range(sr)
    f_min = d_min if f_min is None else f_min
    f_max = d_max if f_max is None else f_max
    freqs = cqt_frequencies(bins_per_octave, f_min, f_max)
    lengths = cqt_kernel_lengths(freqs, bins_per_octave, sr)
    x = w.samples
    n_frames = num_frames(len(x), win_len, hop)
    out = np.zeros((n_frames, len(freqs)))
    for k, (f_k, n_k) in enumerate(zip(freqs, lengths)):
        n = np.arange(n_k)
        kernel = hamming(n_k) / n_k * np.exp(-2j * np.pi * f_k * n / sr)
        for t in range(n_frames):
            first = t * hop + win_len // 2 - n_k // 2
            seg = np.zeros(n_k)
            lo, hi = max(first, 0), min(first + n_k, len(x))
            if hi > lo:
                seg[lo - first : hi - first] = x[lo:hi]
            out[t, k] = abs(np.dot(seg, kernel))
    return out


def dct2_ortho(x: np.ndarray, n_out: int | None = None) -> np.ndarray:
    """Orthonormal DCT-II along the last axis, keeping the first ``n_out`` terms."""
    x = np.asarray(x, dtype=np.float64)
    n_out = x.shape[-1] if n_out is None else n_out
    if n_out > x.shape[-1]:
        raise ValueError(f"n_out {n_out} exceeds input length {x.shape[-1]}")
    return scipy.fft.dct(x, type=2, norm="ortho", axis=-1)[..., :n_out]


def delta(features: np.ndarray, reach: int = 2) -> np.ndarray:
    """Regression deltas over +-``reach`` frames with replicated edge frames."""
    if reach < 1:
        raise ValueError("reach must be >= 1")
    c = np.asarray(features, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1:
        raise ValueError(f"expected a T x D matrix with T >= 1, got shape {c.shape}")
    n_t = c.shape[0]
    padded = np.concatenate([np.repeat(c[:1], reach, axis=0), c, np.repeat(c[-1:], reach, axis=0)])
    out = np.zeros_like(c)
    for n in range(1, reach + 1):
        out += n * (padded[reach + n : reach + n + n_t] - padded[reach - n : reach - n + n_t])
    return out / (2.0 * sum(n * n for n in range(1, reach + 1)))
