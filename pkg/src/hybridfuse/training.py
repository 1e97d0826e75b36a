"""Adam, the step LR schedule, dataset loading and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data_io, dsp
from .autodiff import backward
from .evaluation import compute_eer, predict
from .features import SpectralConfig, extract
from .fusion import uses_streams
from .head import cross_entropy
from .model import Model, ModelConfig
from .synth import clip_for_entry, synth_ssl_features

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "eval_eer", "best_eer")


class DivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = True
    batch_size: int = 32
    epochs: int = 20
    step_size: int = 10
    gamma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)


def adam_step(params, state: AdamState, cfg: TrainConfig, lr: float | None = None):
    """One Adam update of every parameter from its ``.grad``.

    ``params`` is a name -> Tensor mapping. Weight decay is decoupled
    (theta <- theta - lr * wd * theta before the Adam step) unless the
    config asks for the coupled L2 form.
    """
    lr = cfg.lr if lr is None else lr
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise DivergedError(f"diverged: non-finite gradient in {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        if cfg.weight_decay and not cfg.decoupled_weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay and cfg.decoupled_weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    ids: list[str]
    labels: np.ndarray
    tags: list[str]
    sf: np.ndarray | None
    ssl: np.ndarray | None
    feature: str = ""

    def __len__(self):
        return len(self.ids)

    @property
    def label_names(self) -> list[str]:
        return [data_io.LABELS[i] for i in self.labels]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            [self.ids[i] for i in idx],
            self.labels[idx],
            [self.tags[i] for i in idx],
            None if self.sf is None else self.sf[idx],
            None if self.ssl is None else self.ssl[idx],
            self.feature,
        )


def load_dataset(
    manifest: data_io.Manifest,
    feature: str = "mfcc",
    need_sf: bool = True,
    need_ssl: bool = True,
    length: int = dsp.DEFAULT_NUM_SAMPLES,
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE,
) -> Dataset:
    """Extract SF features and load (or synthesize) SSL features for every entry."""
    cfg = SpectralConfig(feature)
    sf, ssl = [], []
    for e in manifest:
        wav = None
        if need_sf or e.ssl_source == "synth":
            wav = clip_for_entry(e, manifest, length, sample_rate)
            if wav.sample_rate != sample_rate:
                raise ValueError(f"{e.utt_id}: sample rate {wav.sample_rate} Hz, expected {sample_rate} Hz")
            wav = dsp.canonicalize_length(wav, length)
        if need_sf:
            sf.append(extract(wav, cfg, e.utt_id).data.astype(np.float32))
        if need_ssl:
            if e.ssl_source == "synth":
                ssl.append(synth_ssl_features(wav).data.astype(np.float32))
            else:
                ssl.append(data_io.read_features(manifest.resolve(e.ssl_source)))
    return Dataset(
        [e.utt_id for e in manifest],
        np.array([e.label_index for e in manifest], dtype=int),
        [e.dataset_tag for e in manifest],
        np.stack(sf) if need_sf and sf else None,
        np.stack(ssl) if need_ssl and ssl else None,
        feature,
    )


def holdout_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; the held-out part gets ``fraction`` of each class."""
    rng = np.random.default_rng([seed, 99])
    train_idx, held_idx = [], []
    for c in (0, 1):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        k = max(1, int(round(fraction * len(idx))))
        held_idx.extend(idx[:k])
        train_idx.extend(idx[k:])
    return ds.subset(sorted(train_idx)), ds.subset(sorted(held_idx))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    eval_eer: float
    best_eer: float

    def row(self) -> tuple:
        return (self.epoch, self.lr, self.train_loss, self.eval_eer, self.best_eer)


class Trainer:
    """Owns a model, its optimizer state and the best-epoch snapshot."""

    def __init__(self, model: Model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.state = AdamState()
        self.epoch = 0
        self.history: list[EpochRecord] = []
        self.best_eer = float("inf")
        self.best_params = model.copy_parameters()

    @classmethod
    def create(cls, model_cfg: ModelConfig, cfg: TrainConfig, train: Dataset) -> Trainer:
        model = Model(model_cfg, seed=cfg.seed)
        use_sf, use_ssl = model.uses
        model.fit_normalizer(train.sf if use_sf else None, train.ssl if use_ssl else None)
        return cls(model, cfg)

    def _batch(self, ds: Dataset, idx):
        use_sf, use_ssl = self.model.uses
        return (
            ds.sf[idx] if use_sf else None,
            ds.ssl[idx] if use_ssl else None,
            ds.labels[idx],
        )

    def step(self, sf, ssl, labels, lr: float) -> float:
        self.model.zero_grad()
        logits, _ = self.model.forward(sf, ssl)
        loss = cross_entropy(logits, labels)
        if not np.isfinite(loss.item()):
            raise DivergedError("diverged: non-finite loss")
        backward(loss)
        adam_step(self.model.named_parameters(), self.state, self.cfg, lr)
        return loss.item()

    def run_epoch(self, train: Dataset, held_out: Dataset) -> EpochRecord:
        epoch = self.epoch
        lr = lr_at(epoch, self.cfg)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(train))
        total = 0.0
        for i in range(0, len(order), self.cfg.batch_size):
            idx = order[i : i + self.cfg.batch_size]
            total += self.step(*self._batch(train, idx), lr) * len(idx)
        eer = self.evaluate(held_out)
        if eer < self.best_eer:
            self.best_eer = eer
            self.best_params = self.model.copy_parameters()
        rec = EpochRecord(epoch, lr, total / len(train), eer, self.best_eer)
        self.history.append(rec)
        self.epoch += 1
        log.info("epoch %d lr=%.3g loss=%.5f eer=%.4f best=%.4f", epoch, lr, rec.train_loss, eer, self.best_eer)
        return rec

    def evaluate(self, ds: Dataset) -> float:
        use_sf, use_ssl = self.model.uses
        scores, _ = predict(self.model, ds.sf if use_sf else None, ds.ssl if use_ssl else None, self.cfg.batch_size)
        return compute_eer(scores, ds.labels)[0]

    def fit(self, train: Dataset, held_out: Dataset, epochs: int | None = None) -> list[EpochRecord]:
        target = self.cfg.epochs if epochs is None else self.epoch + epochs
        while self.epoch < target:
            self.run_epoch(train, held_out)
        return self.history

    def best_model(self) -> Model:
        m = Model(self.model.config, seed=self.cfg.seed)
        m.load_state_arrays(self.best_params)
        return m

    # checkpointing

    def save(self, path):
        """Full training state: current and best parameters, Adam moments, history."""
        arrays = {f"model/{k}": v for k, v in self.model.state_arrays().items()}
        arrays.update({f"best/{k}": v for k, v in self.best_params.items()})
        for k in self.state.m:
            arrays[f"adam.m/{k}"] = self.state.m[k]
            arrays[f"adam.v/{k}"] = self.state.v[k]
        if self.history:
            arrays["history"] = np.array([r.row() for r in self.history], dtype=np.float64)
        meta = {
            "kind": "trainer",
            "model": self.model.config.to_dict(),
            "train": self.cfg.to_dict(),
            "epoch": self.epoch,
            "adam_step": self.state.step,
            "best_eer": self.best_eer if np.isfinite(self.best_eer) else None,
        }
        data_io.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, cfg: TrainConfig | None = None) -> Trainer:
        arrays, meta = data_io.load_checkpoint(path)
        if meta.get("kind") != "trainer":
            raise ValueError(f"{path}: not a trainer checkpoint")
        cfg = cfg or TrainConfig.from_dict(meta["train"])
        model = Model(ModelConfig.from_dict(meta["model"]), seed=cfg.seed)
        model.load_state_arrays(_strip(arrays, "model/"))
        tr = cls(model, cfg)
        tr.best_params = {k: v.reshape(model.state_arrays()[k].shape) for k, v in _strip(arrays, "best/").items()}
        shapes = {k: p.shape for k, p in model.named_parameters().items()}
        tr.state = AdamState(
            {k: v.reshape(shapes[k]) for k, v in _strip(arrays, "adam.m/").items()},
            {k: v.reshape(shapes[k]) for k, v in _strip(arrays, "adam.v/").items()},
            int(meta["adam_step"]),
        )
        tr.epoch = int(meta["epoch"])
        tr.best_eer = float("inf") if meta["best_eer"] is None else float(meta["best_eer"])
        if "history" in arrays:
            tr.history = [
                EpochRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in arrays["history"]
            ]
        return tr


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    trainer: Trainer


def train(
    train_ds: Dataset,
    held_out: Dataset,
    strategy: str,
    cfg: TrainConfig,
    feature: str | None = None,
    shared_qkv: bool = True,
) -> TrainResult:
    """Train one configuration and return the lowest held-out-EER model."""
    if set(np.unique(train_ds.labels)) != {0, 1}:
        raise ValueError("training data must contain both bona fide and spoof utterances")
    use_sf, use_ssl = uses_streams(strategy)
    model_cfg = ModelConfig(
        strategy,
        feature=feature or train_ds.feature,
        d_sf=train_ds.sf.shape[-1] if use_sf else 60,
        d_ssl=train_ds.ssl.shape[-1] if use_ssl else 1024,
        sf_T=train_ds.sf.shape[1] if use_sf else 402,
        ssl_T=train_ds.ssl.shape[1] if use_ssl else 201,
        shared_qkv=shared_qkv,
    )
    trainer = Trainer.create(model_cfg, cfg, train_ds)
    trainer.fit(train_ds, held_out)
    return TrainResult(trainer.best_model(), trainer.history, trainer)


# ---------------------------------------------------------------------------
# model files and metric logs
# ---------------------------------------------------------------------------


def save_model(path, model: Model, extra_meta: dict | None = None):
    meta = {"kind": "model", "model": model.config.to_dict()}
    meta.update(extra_meta or {})
    data_io.save_checkpoint(path, model.state_arrays(), meta)


def load_model(path) -> Model:
    arrays, meta = data_io.load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "trainer":
        cfg = ModelConfig.from_dict(meta["model"])
        model = Model(cfg)
        model.load_state_arrays(_strip(arrays, "best/"))
        return model
    if kind != "model":
        raise ValueError(f"{path}: not a model checkpoint")
    model = Model(ModelConfig.from_dict(meta["model"]))
    model.load_state_arrays(arrays)
    return model


def write_metrics(path, history: list[EpochRecord]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for r in history:
            w.writerow((r.epoch, repr(r.lr), repr(r.train_loss), repr(r.eval_eer), repr(r.best_eer)))


def read_metrics(path) -> list[EpochRecord]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != METRIC_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(METRIC_COLUMNS)}")
    return [EpochRecord(int(r[0]), *map(float, r[1:])) for r in rows[1:]]


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})

