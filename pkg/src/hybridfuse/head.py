"""Attentive-statistics pooling head and the cross-entropy objective.

Logit 0 is bona fide, logit 1 is spoof. The detection score is
logit[bona] - logit[spoof], so higher means more bona fide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import init_bias, init_weight

BONAFIDE, SPOOF = 0, 1
POOL_EPS = 1e-9
DEFAULT_HIDDEN = 64


@dataclass
class HeadParams:
    attn_vector: Tensor
    hidden_w: Tensor
    hidden_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, hidden: int = DEFAULT_HIDDEN):
        return cls(
            init_weight(rng, d, 1, "head.attn_vector"),
            init_weight(rng, 2 * d, hidden, "head.hidden.weight"),
            init_bias(hidden, "head.hidden.bias"),
            init_weight(rng, hidden, 2, "head.out.weight"),
            init_bias(2, "head.out.bias"),
        )

    def parameters(self) -> list[Tensor]:
        return [self.attn_vector, self.hidden_w, self.hidden_b, self.out_w, self.out_b]


def pool_attentive(h: Tensor, p: HeadParams) -> Tensor:
    """Attention-weighted mean and standard deviation over frames.

    (..., T, D) -> (..., 1, 2D)
    """
    t = h.shape[-2]
    alpha = ad.softmax_rows(ad.transpose_last_two(ad.matmul(h, p.attn_vector)))
    mu = ad.matmul(alpha, h)
    diff = ad.sub(h, ad.repeat_rows(mu, t))
    var = ad.matmul(alpha, ad.mul_elementwise(diff, diff))
    std = ad.sqrt(ad.add(var, Tensor(np.full(var.shape, POOL_EPS))))
    return ad.concat_last_axis(mu, std)


def score(h: Tensor, p: HeadParams) -> Tensor:
    """Two-class logits, shape (..., 1, 2)."""
    hidden = ad.relu(ad.linear(pool_attentive(h, p), p.hidden_w, p.hidden_b))
    return ad.linear(hidden, p.out_w, p.out_b)


def detection_score(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data[..., BONAFIDE] - data[..., SPOOF]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over all utterances."""
    labels = np.atleast_1d(np.asarray(labels))
    if not np.all(np.isin(labels, (BONAFIDE, SPOOF))):
        raise ValueError(f"labels must be 0 (bona fide) or 1 (spoof), got {labels.tolist()}")
    n = int(np.prod(logits.shape[:-1]))
    if labels.size != n:
        raise ValueError(f"{labels.size} labels for {n} logit rows")
    onehot = np.zeros(logits.shape)
    onehot.reshape(-1, 2)[np.arange(n), labels.astype(int)] = 1.0
    picked = ad.sum(ad.mul_elementwise(ad.log_softmax_rows(logits), Tensor(onehot)))
    return ad.scale(picked, -1.0 / n)
