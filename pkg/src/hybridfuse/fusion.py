"""Stream alignment and the four fusion strategies.

All functions accept either single utterances (T x D) or batches
(B x T x D); weights are shared over the batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureMatrix

STRATEGIES = ("nofusion-sf", "nofusion-ssl", "concat", "xattn", "mutual", "gating")
FUSION_STRATEGIES = ("concat", "xattn", "mutual", "gating")

DEFAULT_D = 128


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def init_bias(n: int, name: str) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, name=name)


@dataclass
class AlignmentParams:
    proj_ssl: tuple[Tensor, Tensor] | None
    proj_sf: tuple[Tensor, Tensor] | None
    target_T: int = 201
    target_D: int = DEFAULT_D

    @classmethod
    def init(cls, d_sf, d_ssl, rng, target_T=201, target_D=DEFAULT_D, use_sf=True, use_ssl=True):
        proj_sf = proj_ssl = None
        if use_sf:
            proj_sf = (init_weight(rng, d_sf, target_D, "align.proj_sf.weight"), init_bias(target_D, "align.proj_sf.bias"))
        if use_ssl:
            proj_ssl = (init_weight(rng, d_ssl, target_D, "align.proj_ssl.weight"), init_bias(target_D, "align.proj_ssl.bias"))
        return cls(proj_ssl, proj_sf, target_T, target_D)

    def parameters(self) -> list[Tensor]:
        out = []
        for proj in (self.proj_sf, self.proj_ssl):
            if proj is not None:
                out.extend(proj)
        return out


@dataclass
class FusionParams:
    strategy: str
    weights: dict[str, Tensor] = field(default_factory=dict)
    shared_qkv: bool = True

    @classmethod
    def init(cls, strategy: str, d: int, rng: np.random.Generator, shared_qkv: bool = True):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {strategy!r}; expected one of {STRATEGIES}")
        w: dict[str, Tensor] = {}
        if strategy in ("xattn", "mutual"):
            for key in ("W_Q", "W_K", "W_V"):
                w[key] = init_weight(rng, d, d, f"fusion.{key}")
        if strategy == "mutual" and not shared_qkv:
            for key in ("W_Q2", "W_K2", "W_V2"):
                w[key] = init_weight(rng, d, d, f"fusion.{key}")
        if strategy in ("concat", "mutual"):
            w["out.weight"] = init_weight(rng, 2 * d, d, "fusion.out.weight")
            w["out.bias"] = init_bias(d, "fusion.out.bias")
        if strategy == "gating":
            w["W_G"] = init_weight(rng, d, 2, "fusion.W_G")
        return cls(strategy, w, shared_qkv)

    def parameters(self) -> list[Tensor]:
        return list(self.weights.values())

    def __getitem__(self, key: str) -> Tensor:
        return self.weights[key]


@dataclass
class GateTrace:
    """Per-frame (w_sf, w_ssl); shape (T, 2), or (B, T, 2) for a batch."""

    weights: np.ndarray

    @property
    def w_sf(self) -> np.ndarray:
        return self.weights[..., 0]

    @property
    def w_ssl(self) -> np.ndarray:
        return self.weights[..., 1]

    def split(self) -> list[GateTrace]:
        if self.weights.ndim == 2:
            return [self]
        return [GateTrace(w) for w in self.weights]


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, FeatureMatrix):
        return Tensor(x.data)
    return Tensor(x)


def _check_pair(sf: Tensor, ssl: Tensor, op: str):
    if sf.shape != ssl.shape:
        raise ValueError(f"{op}: stream shapes differ {sf.shape} vs {ssl.shape}")


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


def downsample(sf: Tensor, target_T: int) -> Tensor:
    t = sf.shape[-2]
    if t == target_T:
        return sf
    if target_T < 1 or t % target_T:
        raise ValueError(f"incompatible frame rates: {t} SF frames cannot pool to {target_T}")
    return ad.pool_rows(sf, t // target_T)


def align(sf, ssl, p: AlignmentParams) -> tuple[Tensor | None, Tensor | None]:
    """Pool SF frames down to the SSL frame count and project both streams to D."""
    target_T = p.target_T
    ssl_t = None if ssl is None else _as_tensor(ssl)
    if ssl_t is not None:
        target_T = ssl_t.shape[-2]
    sf_out = ssl_out = None
    if p.proj_sf is not None:
        if sf is None:
            raise ValueError("alignment expects an SF stream")
        pooled = downsample(_as_tensor(sf), target_T)
        sf_out = ad.linear(pooled, *p.proj_sf)
    if p.proj_ssl is not None:
        if ssl_t is None:
            raise ValueError("alignment expects an SSL stream")
        ssl_out = ad.linear(ssl_t, *p.proj_ssl)
    return sf_out, ssl_out


# ---------------------------------------------------------------------------
# fusion strategies
# ---------------------------------------------------------------------------


def cross_attend(query_src: Tensor, kv_src: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor):
    """Softmax(Q K^T / sqrt(D)) V + query_src; also returns the attention matrix."""
    d = query_src.shape[-1]
    q = ad.matmul(query_src, w_q)
    k = ad.matmul(kv_src, w_k)
    v = ad.matmul(kv_src, w_v)
    attn = ad.softmax_rows(ad.matmul(q, ad.transpose_last_two(k)), 1.0 / math.sqrt(d))
    return ad.add(ad.matmul(attn, v), query_src), attn


def fuse_concat(sf: Tensor, ssl: Tensor, p: FusionParams) -> Tensor:
    _check_pair(sf, ssl, "concat")
    return ad.linear(ad.concat_last_axis(sf, ssl), p["out.weight"], p["out.bias"])


def fuse_cross_attention(sf: Tensor, ssl: Tensor, p: FusionParams, return_attention: bool = False):
    """SSL queries attend over SF keys/values, with an SSL residual."""
    _check_pair(sf, ssl, "cross-attention")
    h, attn = cross_attend(ssl, sf, p["W_Q"], p["W_K"], p["W_V"])
    return (h, attn) if return_attention else h


def fuse_mutual_cross_attention(sf: Tensor, ssl: Tensor, p: FusionParams, return_attention: bool = False):
    _check_pair(sf, ssl, "mutual cross-attention")
    h_ssl_sf, a1 = cross_attend(ssl, sf, p["W_Q"], p["W_K"], p["W_V"])
    if p.shared_qkv:
        wq, wk, wv = p["W_Q"], p["W_K"], p["W_V"]
    else:
        wq, wk, wv = p["W_Q2"], p["W_K2"], p["W_V2"]
    h_sf_ssl, a2 = cross_attend(sf, ssl, wq, wk, wv)
    out = ad.linear(ad.concat_last_axis(h_sf_ssl, h_ssl_sf), p["out.weight"], p["out.bias"])
    return (out, (a1, a2)) if return_attention else out


def fuse_gating(sf: Tensor, ssl: Tensor, p: FusionParams) -> tuple[Tensor, GateTrace]:
    """Per-frame convex mix of the streams, weights = softmax(ssl W_G)."""
    _check_pair(sf, ssl, "gating")
    w = ad.softmax_rows(ad.matmul(ssl, p["W_G"]))
    fused = ad.add(ad.mul_rows(sf, ad.take_last(w, 0)), ad.mul_rows(ssl, ad.take_last(w, 1)))
    return fused, GateTrace(w.data.copy())


def fuse(sf: Tensor | None, ssl: Tensor | None, p: FusionParams) -> tuple[Tensor, GateTrace | None]:
    s = p.strategy
    if s == "nofusion-sf":
        return sf, None
    if s == "nofusion-ssl":
        return ssl, None
    if s == "concat":
        return fuse_concat(sf, ssl, p), None
    if s == "xattn":
        return fuse_cross_attention(sf, ssl, p), None
    if s == "mutual":
        return fuse_mutual_cross_attention(sf, ssl, p), None
    if s == "gating":
        return fuse_gating(sf, ssl, p)
    raise ValueError(f"unknown fusion strategy {s!r}")


def uses_streams(strategy: str) -> tuple[bool, bool]:
    """(needs SF, needs SSL) for a strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}; expected one of {STRATEGIES}")
    return strategy != "nofusion-ssl", strategy != "nofusion-sf"
