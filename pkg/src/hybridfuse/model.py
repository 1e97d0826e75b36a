"""Full detector: standardisation, alignment, fusion and the scoring head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .fusion import DEFAULT_D, AlignmentParams, FusionParams, GateTrace, align, fuse, uses_streams
from .gradcheck import check_gradients, weighted_sum
from .head import DEFAULT_HIDDEN, HeadParams, cross_entropy, score


@dataclass(frozen=True)
class ModelConfig:
    strategy: str
    feature: str = "mfcc"
    d_sf: int = 60
    d_ssl: int = 1024
    sf_T: int = 402
    ssl_T: int = 201
    d_model: int = DEFAULT_D
    hidden: int = DEFAULT_HIDDEN
    shared_qkv: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        use_sf, use_ssl = uses_streams(config.strategy)
        rng = np.random.default_rng(seed)
        self.align = AlignmentParams.init(
            config.d_sf, config.d_ssl, rng, config.ssl_T, config.d_model, use_sf=use_sf, use_ssl=use_ssl
        )
        self.fusion = FusionParams.init(config.strategy, config.d_model, rng, config.shared_qkv)
        self.head = HeadParams.init(config.d_model, rng, config.hidden)
        # per-dimension standardisation, fitted on training data
        self.norm = {
            "norm.sf_mean": np.zeros(config.d_sf),
            "norm.sf_std": np.ones(config.d_sf),
            "norm.ssl_mean": np.zeros(config.d_ssl),
            "norm.ssl_std": np.ones(config.d_ssl),
        }

    @property
    def uses(self) -> tuple[bool, bool]:
        return uses_streams(self.config.strategy)

    def parameters(self) -> list[Tensor]:
        return self.align.parameters() + self.fusion.parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def fit_normalizer(self, sf: np.ndarray | None, ssl: np.ndarray | None):
        """Mean / std per feature dimension over every frame of every utterance."""
        for key, x in (("sf", sf), ("ssl", ssl)):
            if x is None:
                continue
            flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
            self.norm[f"norm.{key}_mean"] = flat.mean(axis=0)
            self.norm[f"norm.{key}_std"] = np.maximum(flat.std(axis=0), 1e-8)

    def _standardize(self, x, key):
        if x is None:
            return None
        x = np.asarray(x, dtype=np.float64)
        return Tensor((x - self.norm[f"norm.{key}_mean"]) / self.norm[f"norm.{key}_std"])

    def forward(self, sf, ssl) -> tuple[Tensor, GateTrace | None]:
        """Logits (..., 1, 2) for a single utterance or a batch."""
        use_sf, use_ssl = self.uses
        sf_t = self._standardize(sf if use_sf else None, "sf")
        ssl_t = self._standardize(ssl if use_ssl else None, "ssl")
        a_sf, a_ssl = align(sf_t, ssl_t, self.align)
        fused, trace = fuse(a_sf, a_ssl, self.fusion)
        return score(fused, self.head), trace

    # checkpoint plumbing

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters().items()}
        out.update(self.norm)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = [k for k in list(params) + list(self.norm) if k not in arrays]
        if missing:
            raise ValueError(f"checkpoint lacks entries for {missing}")
        for name, p in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.size != p.data.size:
                raise ValueError(f"checkpoint entry {name!r} has {value.size} values, model expects shape {p.shape}")
            p.data = value.reshape(p.shape).copy()
            p.zero_grad()
        for name in self.norm:
            self.norm[name] = np.asarray(arrays[name], dtype=np.float64).reshape(-1).copy()

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}


def model_loss(model: Model, sf, ssl, labels) -> Tensor:
    logits, _ = model.forward(sf, ssl)
    return cross_entropy(logits, labels)


def gradcheck_strategy(strategy: str, seeds: int = 10, t: int = 4, d: int = 3, shared_qkv: bool = True) -> float:
    """Largest finite-difference relative error over every trainable group.

    Runs the whole forward path (alignment, fusion, head) at toy sizes for
    ``seeds`` random initialisations and inputs. The probe is a random
    linear functional of the logits; cross-entropy saturates on confidently
    classified toy inputs and would leave gradients too small to measure.
    """
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(
            strategy, d_sf=5, d_ssl=6, sf_T=2 * t, ssl_T=t, d_model=d, hidden=4, shared_qkv=shared_qkv
        )
        model = Model(cfg, seed=seed)
        for p in model.parameters():
            p.data = rng.normal(0.0, 0.8, p.shape)
        sf = rng.standard_normal((2, 2 * t, 5))
        ssl = rng.standard_normal((2, t, 6))
        probe = rng.standard_normal((2, 1, 2))
        errs = check_gradients(lambda: weighted_sum(model.forward(sf, ssl)[0], probe), model.parameters())
        worst = max(worst, max(errs.values()))
    return worst

