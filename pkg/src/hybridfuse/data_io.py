"""On-disk formats: PCM WAV, named-matrix files, manifests.

Named-matrix record layout (all integers little-endian u32)::

    magic (4 bytes) | name length | UTF-8 name | rows | cols | rows*cols values

Magic ``SFF1`` carries float32 values (feature files); ``SFD1`` carries
float64 values (checkpoints, so training state survives a round trip
bit for bit). A file is a sequence of records.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .dsp import Waveform

MAGIC_F32 = b"SFF1"
MAGIC_F64 = b"SFD1"
_DTYPES = {MAGIC_F32: np.dtype("<f4"), MAGIC_F64: np.dtype("<f8")}
META_PREFIX = "__meta__"

LABELS = ("bonafide", "spoof")


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """16-bit PCM mono WAV, scaled to [-1, 1) by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except wave.Error as e:
        raise FormatError(f"{path}: not a PCM WAV file ({e})") from None
    if channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform):
    pcm = quantize_pcm16(w.samples)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# named-matrix files
# ---------------------------------------------------------------------------


def _encode(name: str, m: np.ndarray, magic: bytes) -> bytes:
    m = np.asarray(m)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"entry {name!r}: only 2-D matrices can be stored, got shape {m.shape}")
    name_b = name.encode("utf-8")
    head = magic + struct.pack("<I", len(name_b)) + name_b + struct.pack("<II", *m.shape)
    return head + np.ascontiguousarray(m, dtype=_DTYPES[magic]).tobytes()


def write_matrices(path, entries: Mapping[str, np.ndarray], precision: str = "f32"):
    magic = {"f32": MAGIC_F32, "f64": MAGIC_F64}[precision]
    blob = b"".join(_encode(name, m, magic) for name, m in entries.items())
    Path(path).write_bytes(blob)


def read_matrices(path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    out: dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(buf):
        magic = buf[pos : pos + 4]
        if magic not in _DTYPES:
            raise FormatError(f"{path}: bad magic {magic!r} at byte {pos}; expected SFF1 or SFD1")
        try:
            (n_name,) = struct.unpack_from("<I", buf, pos + 4)
            pos += 8
            name = buf[pos : pos + n_name].decode("utf-8")
            pos += n_name
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError) as e:
            raise FormatError(f"{path}: truncated or corrupt record header ({e})") from None
        dtype = _DTYPES[magic]
        nbytes = rows * cols * dtype.itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: entry {name!r} truncated ({rows}x{cols} declared)")
        out[name] = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    return out


def write_features(path, data: np.ndarray, name: str = "features"):
    write_matrices(path, {name: data}, "f32")


def read_features(path) -> np.ndarray:
    entries = read_matrices(path)
    if not entries:
        raise FormatError(f"{path}: empty feature file")
    return next(iter(entries.values()))


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None):
    """float64 named matrices plus an optional JSON metadata record."""
    entries = {}
    if meta is not None:
        entries[META_PREFIX + json.dumps(meta, sort_keys=True)] = np.zeros((0, 0))
    for name, value in tensors.items():
        if name.startswith(META_PREFIX):
            raise ValueError(f"reserved entry name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        entries[name] = value.reshape(1, -1) if value.ndim < 2 else value
    write_matrices(path, entries, "f64")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    meta: dict = {}
    tensors = {}
    for name, value in read_matrices(path).items():
        if name.startswith(META_PREFIX):
            meta = json.loads(name[len(META_PREFIX) :])
        else:
            tensors[name] = value
    return tensors, meta


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    source: str
    ssl_source: str
    label: str
    dataset_tag: str

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.label not in LABELS:
                raise ValueError(f"utterance {e.utt_id!r}: label must be one of {LABELS}, got {e.label!r}")
            if e.utt_id in seen:
                raise ValueError(f"duplicate utterance id {e.utt_id!r}")
            seen.add(e.utt_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.root / p

    def labels(self) -> set[str]:
        return {e.label for e in self.entries}


def parse_manifest(lines: Iterable[str], root=".", origin: str = "<manifest>") -> Manifest:
    entries = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise FormatError(f"{origin}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        if any(not f for f in fields):
            raise FormatError(f"{origin}:{lineno}: empty field")
        utt, source, ssl_source, label, tag = fields
        if label not in LABELS:
            raise FormatError(f"{origin}:{lineno}: label must be 'bonafide' or 'spoof', got {label!r}")
        entries.append(ManifestEntry(utt, source, ssl_source, label, tag))
    try:
        return Manifest(entries, Path(root))
    except ValueError as e:
        raise FormatError(f"{origin}: {e}") from None


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return parse_manifest(f, root=path.parent, origin=str(path))


def write_manifest(path, manifest: Manifest):
    lines = [
        "\t".join((e.utt_id, e.source, e.ssl_source, e.label, e.dataset_tag)) + "\n" for e in manifest.entries
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")
