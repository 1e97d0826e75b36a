"""Equal error rate, batch scoring and gate-weight aggregation."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fusion import GateTrace
from .head import detection_score

log = logging.getLogger(__name__)

SCORE_HEADER = ("utt_id", "score", "label")
POLARITY_NOTE = "# score polarity: higher = more bona fide"


@dataclass
class ScoreSet:
    entries: list[tuple[str, float, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        bona = np.array([s for _, s, lab in self.entries if lab == "bonafide"], dtype=np.float64)
        spoof = np.array([s for _, s, lab in self.entries if lab == "spoof"], dtype=np.float64)
        return bona, spoof


class PolarityWarning(UserWarning):
    pass


def operating_points(bona: np.ndarray, spoof: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, FRR) at -inf, every distinct score, +inf.

    FAR(t) is the fraction of spoof scores >= t, FRR(t) the fraction of
    bona fide scores < t.
    """
    bona = np.sort(np.asarray(bona, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof, dtype=np.float64))
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([bona, spoof])), [np.inf]])
    far = (len(spoof) - np.searchsorted(spoof, thresholds, side="left")) / len(spoof)
    frr = np.searchsorted(bona, thresholds, side="left") / len(bona)
    return thresholds, far, frr


def eer_from_points(thresholds, far, frr) -> tuple[float, float]:
    """Crossing of FAR and FRR, interpolated linearly between adjacent points."""
    diff = far - frr
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return float(far[i]), float(thresholds[i])
    lam = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + lam * (far[i] - far[i - 1])
    lo, hi = thresholds[i - 1], thresholds[i]
    if math.isfinite(lo) and math.isfinite(hi):
        thr = lo + lam * (hi - lo)
    else:
        thr = lo if math.isfinite(lo) else hi
    return float(eer), float(thr)


def compute_eer(scores, labels=None) -> tuple[float, float]:
    """EER and its threshold.

    Accepts a :class:`ScoreSet`, or score and label arrays (label 0 or
    "bonafide" = bona fide, 1 or "spoof" = spoof). Higher scores must mean
    more bona fide.
    """
    if isinstance(scores, ScoreSet):
        bona, spoof = scores.split()
    else:
        s = np.asarray(scores, dtype=np.float64)
        lab = np.asarray(labels)
        is_spoof = (lab == 1) | (lab == "spoof")
        bona, spoof = s[~is_spoof], s[is_spoof]
    if len(bona) == 0 or len(spoof) == 0:
        raise ValueError("EER needs at least one bona fide and one spoof score")
    if not (np.all(np.isfinite(bona)) and np.all(np.isfinite(spoof))):
        raise ValueError("scores must be finite")
    eer, thr = eer_from_points(*operating_points(bona, spoof))
    if eer > 0.5:
        warnings.warn(f"EER {eer:.3f} > 0.5: score polarity looks inverted", PolarityWarning, stacklevel=2)
    return eer, thr


# ---------------------------------------------------------------------------
# batch scoring
# ---------------------------------------------------------------------------


def predict(model, sf, ssl, batch_size: int = 32) -> tuple[np.ndarray, list[GateTrace]]:
    """Detection scores for stacked utterances; gate traces when gating."""
    n = len(sf) if sf is not None else len(ssl)
    scores = np.empty(n)
    traces: list[GateTrace] = []
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        logits, trace = model.forward(None if sf is None else sf[sl], None if ssl is None else ssl[sl])
        scores[sl] = detection_score(logits).reshape(-1)
        if trace is not None:
            traces.extend(trace.split())
    return scores, traces


def score_manifest(model, dataset, batch_size: int = 32) -> tuple[ScoreSet, list[GateTrace]]:
    """One score per utterance of a loaded dataset (see ``training.load_dataset``)."""
    if len(dataset) == 0:
        return ScoreSet(), []
    scores, traces = predict(model, dataset.sf, dataset.ssl, batch_size)
    entries = [(u, float(s), lab) for u, s, lab in zip(dataset.ids, scores, dataset.label_names)]
    return ScoreSet(entries), traces


def write_scores(path, scores: ScoreSet):
    with open(path, "w", newline="") as f:
        f.write(POLARITY_NOTE + "\n")
        w = csv.writer(f)
        w.writerow(SCORE_HEADER)
        for utt, s, lab in scores.entries:
            w.writerow((utt, repr(float(s)), lab))


def read_scores(path) -> ScoreSet:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(line for line in f if not line.startswith("#"))]
    if not rows or tuple(rows[0]) != SCORE_HEADER:
        raise ValueError(f"{path}: expected header {','.join(SCORE_HEADER)}")
    return ScoreSet([(r[0], float(r[1]), r[2]) for r in rows[1:]])


# ---------------------------------------------------------------------------
# gate analysis
# ---------------------------------------------------------------------------


@dataclass
class GateRow:
    feature: str
    dataset: str
    w_sf: float
    w_ssl: float
    n_frames: int
    n_utterances: int


@dataclass
class GateReport:
    rows: list[GateRow]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("feature", "dataset", "w_sf", "w_ssl"))
            for r in self.rows:
                w.writerow((r.feature, r.dataset, repr(r.w_sf), repr(r.w_ssl)))


def aggregate_gates(
    traces: Iterable[tuple[str, str, GateTrace]], per_utterance: bool = False
) -> GateReport:
    """Mean w_sf / w_ssl per (feature, dataset).

    By default every frame of every utterance counts once (global frame
    pool); ``per_utterance`` averages utterance means instead.
    """
    groups: dict[tuple[str, str], list[np.ndarray]] = {}
    for feature, dataset, trace in traces:
        groups.setdefault((feature, dataset), []).append(np.asarray(trace.weights).reshape(-1, 2))
    rows = []
    for (feature, dataset), ws in sorted(groups.items()):
        ws = [w for w in ws if len(w)]
        if not ws:
            log.warning("no frames for feature=%s dataset=%s; row omitted", feature, dataset)
            continue
        if per_utterance:
            mean = np.mean([w.mean(axis=0) for w in ws], axis=0)
        else:
            mean = np.concatenate(ws).mean(axis=0)
        rows.append(GateRow(feature, dataset, float(mean[0]), float(mean[1]), sum(map(len, ws)), len(ws)))
    return GateReport(rows)


def write_gate_trace(path, trace: GateTrace):
    w = np.asarray(trace.weights).reshape(-1, 2)
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(("frame_index", "w_sf", "w_ssl"))
        for t, (a, b) in enumerate(w):
            out.writerow((t, repr(float(a)), repr(float(b))))


def read_gate_trace(path) -> GateTrace:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != ("frame_index", "w_sf", "w_ssl"):
        raise ValueError(f"{path}: expected header frame_index,w_sf,w_ssl")
    return GateTrace(np.array([[float(r[1]), float(r[2])] for r in rows[1:]]).reshape(-1, 2))


def collect_traces(root) -> list[tuple[str, str, GateTrace]]:
    """Read traces laid out as ``<root>/<feature>/<dataset>/<utt>.csv``."""
    root = Path(root)
    out = []
    for path in sorted(root.glob("*/*/*.csv")):
        out.append((path.parent.parent.name, path.parent.name, read_gate_trace(path)))
    return out


def format_eer(eer: float) -> str:
    return f"EER: {100.0 * eer:.2f}%"


def summarize(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())
