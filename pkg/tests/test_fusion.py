import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridfuse import autodiff as ad
from hybridfuse.autodiff import Tensor
from hybridfuse.fusion import (
    FUSION_STRATEGIES,
    STRATEGIES,
    AlignmentParams,
    FusionParams,
    align,
    downsample,
    fuse,
    fuse_concat,
    fuse_cross_attention,
    fuse_gating,
    fuse_mutual_cross_attention,
    uses_streams,
)
from hybridfuse.gradcheck import TOLERANCE, check_gradients, weighted_sum
from hybridfuse.model import gradcheck_strategy


def streams(t, d, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (t, d) if batch is None else (batch, t, d)
    return Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape))


def params(strategy, d, seed=0, shared_qkv=True):
    return FusionParams.init(strategy, d, np.random.default_rng(seed), shared_qkv)


def set_weight(p, key, value):
    p[key].data = np.asarray(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


class TestAlign:
    def test_default_shapes(self):
        rng = np.random.default_rng(0)
        ap = AlignmentParams.init(60, 1024, rng)
        sf, ssl = align(rng.standard_normal((402, 60)), rng.standard_normal((201, 1024)), ap)
        assert sf.shape == (201, 128) and ssl.shape == (201, 128)

    def test_batched_shapes(self):
        rng = np.random.default_rng(0)
        ap = AlignmentParams.init(60, 1024, rng)
        sf, ssl = align(rng.standard_normal((3, 402, 60)), rng.standard_normal((3, 201, 1024)), ap)
        assert sf.shape == (3, 201, 128) and ssl.shape == (3, 201, 128)

    def test_pair_pooling(self):
        x = Tensor(np.array([[1.0, 10.0], [3.0, 20.0], [5.0, 30.0], [9.0, 40.0]]))
        np.testing.assert_array_equal(downsample(x, 2).data, [[2.0, 15.0], [7.0, 35.0]])

    def test_general_ratio(self):
        x = Tensor(np.arange(6.0)[:, None])
        np.testing.assert_array_equal(downsample(x, 2).data, [[1.0], [4.0]])

    def test_incompatible(self):
        with pytest.raises(ValueError, match="incompatible frame rates"):
            downsample(Tensor(np.ones((5, 2))), 2)

    def test_identity_projection_passes_through(self):
        rng = np.random.default_rng(1)
        ap = AlignmentParams.init(4, 4, rng, target_T=3, target_D=4)
        for w, b in (ap.proj_sf, ap.proj_ssl):
            w.data = np.eye(4)
            b.data = np.zeros(4)
        sf = rng.standard_normal((6, 4))
        ssl = rng.standard_normal((3, 4))
        a_sf, a_ssl = align(sf, ssl, ap)
        np.testing.assert_array_equal(a_sf.data, (sf[0::2] + sf[1::2]) / 2)
        np.testing.assert_array_equal(a_ssl.data, ssl)

    def test_param_names(self):
        ap = AlignmentParams.init(60, 1024, np.random.default_rng(0))
        assert [p.name for p in ap.parameters()] == [
            "align.proj_sf.weight",
            "align.proj_sf.bias",
            "align.proj_ssl.weight",
            "align.proj_ssl.bias",
        ]

    def test_init_scale(self):
        ap = AlignmentParams.init(60, 1024, np.random.default_rng(0))
        w, b = ap.proj_ssl
        assert np.abs(w.data).max() <= 1 / math.sqrt(1024)
        assert not np.any(b.data)


# ---------------------------------------------------------------------------
# parameter census
# ---------------------------------------------------------------------------


class TestCensus:
    @pytest.mark.parametrize(
        "strategy,keys",
        [
            ("nofusion-sf", []),
            ("nofusion-ssl", []),
            ("concat", ["out.weight", "out.bias"]),
            ("xattn", ["W_Q", "W_K", "W_V"]),
            ("mutual", ["W_Q", "W_K", "W_V", "out.weight", "out.bias"]),
            ("gating", ["W_G"]),
        ],
    )
    def test_fields(self, strategy, keys):
        p = params(strategy, 8)
        assert sorted(p.weights) == sorted(keys)

    def test_shapes(self):
        assert params("concat", 8)["out.weight"].shape == (16, 8)
        assert params("mutual", 8)["out.weight"].shape == (16, 8)
        assert params("gating", 8)["W_G"].shape == (8, 2)
        assert params("xattn", 8)["W_Q"].shape == (8, 8)

    def test_unshared_mutual(self):
        p = params("mutual", 8, shared_qkv=False)
        assert sorted(p.weights) == sorted(["W_Q", "W_K", "W_V", "W_Q2", "W_K2", "W_V2", "out.weight", "out.bias"])

    def test_unknown(self):
        with pytest.raises(ValueError):
            FusionParams.init("sum", 8, np.random.default_rng(0))
        with pytest.raises(ValueError):
            uses_streams("sum")

    def test_streams(self):
        assert uses_streams("nofusion-sf") == (True, False)
        assert uses_streams("nofusion-ssl") == (False, True)
        assert all(uses_streams(s) == (True, True) for s in FUSION_STRATEGIES)


# ---------------------------------------------------------------------------
# algebraic identities
# ---------------------------------------------------------------------------


class TestConcat:
    def test_zero_weight(self):
        sf, ssl = streams(5, 4)
        p = params("concat", 4)
        b = np.arange(4.0)
        set_weight(p, "out.weight", np.zeros((8, 4)))
        set_weight(p, "out.bias", b)
        np.testing.assert_array_equal(fuse_concat(sf, ssl, p).data, np.tile(b, (5, 1)))

    def test_selector(self):
        sf, ssl = streams(5, 4)
        p = params("concat", 4)
        set_weight(p, "out.weight", np.vstack([np.eye(4), np.zeros((4, 4))]))
        set_weight(p, "out.bias", np.zeros(4))
        np.testing.assert_array_equal(fuse_concat(sf, ssl, p).data, sf.data)
        set_weight(p, "out.weight", np.vstack([np.zeros((4, 4)), np.eye(4)]))
        np.testing.assert_array_equal(fuse_concat(sf, ssl, p).data, ssl.data)

    def test_mismatch(self):
        p = params("concat", 4)
        with pytest.raises(ValueError):
            fuse_concat(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 4))), p)


class TestCrossAttention:
    def test_zero_values_give_ssl(self):
        sf, ssl = streams(6, 4)
        p = params("xattn", 4)
        set_weight(p, "W_V", np.zeros((4, 4)))
        assert np.array_equal(fuse_cross_attention(sf, ssl, p).data, ssl.data)

    def test_zero_queries_give_uniform_attention(self):
        sf, ssl = streams(6, 4)
        p = params("xattn", 4)
        set_weight(p, "W_Q", np.zeros((4, 4)))
        h, attn = fuse_cross_attention(sf, ssl, p, return_attention=True)
        np.testing.assert_allclose(attn.data, 1 / 6, atol=1e-15)
        expected = (sf.data @ p["W_V"].data).mean(axis=0) + ssl.data
        np.testing.assert_allclose(h.data, expected, atol=1e-12)

    def test_matches_formula(self):
        sf, ssl = streams(5, 3, seed=2)
        p = params("xattn", 3, seed=3)
        q = ssl.data @ p["W_Q"].data
        k = sf.data @ p["W_K"].data
        v = sf.data @ p["W_V"].data
        s = q @ k.T / math.sqrt(3)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(fuse_cross_attention(sf, ssl, p).data, a @ v + ssl.data, atol=1e-12)

    @given(seed=st.integers(0, 2**31 - 1), t=st.integers(2, 32), d=st.integers(2, 32))
    @settings(max_examples=30, deadline=None)
    def test_rows_stochastic(self, seed, t, d):
        sf, ssl = streams(t, d, seed)
        p = params("xattn", d, seed)
        for w in p.parameters():
            w.data *= 5.0
        _, attn = fuse_cross_attention(sf, ssl, p, return_attention=True)
        assert np.all(attn.data >= 0)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


class TestMutual:
    def test_zero_attention_selector_gives_sf(self):
        sf, ssl = streams(6, 4)
        p = params("mutual", 4)
        for key in ("W_Q", "W_K", "W_V"):
            set_weight(p, key, np.zeros((4, 4)))
        set_weight(p, "out.weight", np.vstack([np.eye(4), np.zeros((4, 4))]))
        set_weight(p, "out.bias", np.zeros(4))
        assert np.array_equal(fuse_mutual_cross_attention(sf, ssl, p).data, sf.data)

    def test_second_half_is_ssl_direction(self):
        sf, ssl = streams(6, 4)
        p = params("mutual", 4)
        set_weight(p, "W_V", np.zeros((4, 4)))
        set_weight(p, "out.weight", np.vstack([np.zeros((4, 4)), np.eye(4)]))
        set_weight(p, "out.bias", np.zeros(4))
        assert np.array_equal(fuse_mutual_cross_attention(sf, ssl, p).data, ssl.data)

    def test_both_attention_maps_stochastic(self):
        sf, ssl = streams(7, 5)
        _, (a1, a2) = fuse_mutual_cross_attention(sf, ssl, params("mutual", 5), return_attention=True)
        for a in (a1, a2):
            np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_shared_weights_are_reused(self):
        sf, ssl = streams(4, 3)
        p = params("mutual", 3, shared_qkv=False)
        for k in ("W_Q", "W_K", "W_V"):
            p[k + "2"].data = p[k].data.copy()
        shared = FusionParams("mutual", {k: v for k, v in p.weights.items() if not k.endswith("2")}, True)
        np.testing.assert_array_equal(
            fuse_mutual_cross_attention(sf, ssl, p).data, fuse_mutual_cross_attention(sf, ssl, shared).data
        )


class TestGating:
    def test_zero_gate_is_average(self):
        sf, ssl = streams(6, 4)
        p = params("gating", 4)
        set_weight(p, "W_G", np.zeros((4, 2)))
        fused, trace = fuse_gating(sf, ssl, p)
        np.testing.assert_array_equal(trace.weights, np.full((6, 2), 0.5))
        np.testing.assert_allclose(fused.data, (sf.data + ssl.data) / 2, atol=1e-15)

    def test_saturated_gate_selects_sf(self):
        sf, ssl = streams(6, 4)
        ssl.data[:, 0] = 1.0 + np.abs(ssl.data[:, 0])
        w = np.zeros((4, 2))
        w[0, 0] = 100.0
        p = params("gating", 4)
        set_weight(p, "W_G", w)
        fused, trace = fuse_gating(sf, ssl, p)
        np.testing.assert_allclose(fused.data, sf.data, atol=1e-9)
        np.testing.assert_allclose(trace.w_sf, 1.0, atol=1e-12)

    @given(seed=st.integers(0, 2**31 - 1), t=st.integers(2, 32), d=st.integers(2, 32))
    @settings(max_examples=30, deadline=None)
    def test_convexity(self, seed, t, d):
        sf, ssl = streams(t, d, seed)
        p = params("gating", d, seed)
        p["W_G"].data *= 10.0
        fused, trace = fuse_gating(sf, ssl, p)
        w = trace.w_sf[:, None]
        assert np.all((w >= 0) & (w <= 1))
        np.testing.assert_allclose(trace.weights.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(fused.data, w * sf.data + (1 - w) * ssl.data, atol=1e-12)

    def test_permutation_equivariance(self):
        sf, ssl = streams(9, 4, seed=4)
        p = params("gating", 4, seed=4)
        perm = np.random.default_rng(4).permutation(9)
        out, trace = fuse_gating(sf, ssl, p)
        out_p, trace_p = fuse_gating(Tensor(sf.data[perm]), Tensor(ssl.data[perm]), p)
        np.testing.assert_array_equal(out_p.data, out.data[perm])
        np.testing.assert_array_equal(trace_p.weights, trace.weights[perm])

    def test_batched_trace_splits(self):
        sf, ssl = streams(5, 3, batch=4)
        _, trace = fuse_gating(sf, ssl, params("gating", 3))
        parts = trace.split()
        assert len(parts) == 4 and parts[0].weights.shape == (5, 2)


# ---------------------------------------------------------------------------
# dispatch and shape contract
# ---------------------------------------------------------------------------


class TestDispatch:
    def test_gating(self):
        sf, ssl = streams(5, 3)
        p = params("gating", 3)
        out, trace = fuse(sf, ssl, p)
        ref, ref_trace = fuse_gating(sf, ssl, p)
        np.testing.assert_array_equal(out.data, ref.data)
        np.testing.assert_array_equal(trace.weights, ref_trace.weights)

    def test_nofusion(self):
        sf, ssl = streams(5, 3)
        assert fuse(sf, ssl, params("nofusion-sf", 3))[0] is sf
        assert fuse(sf, ssl, params("nofusion-ssl", 3))[0] is ssl

    def test_no_trace_except_gating(self):
        sf, ssl = streams(5, 3)
        for s in ("concat", "xattn", "mutual"):
            assert fuse(sf, ssl, params(s, 3))[1] is None

    def test_unknown(self):
        p = params("concat", 3)
        p.strategy = "bogus"
        with pytest.raises(ValueError):
            fuse(*streams(5, 3), p)

    @given(seed=st.integers(0, 2**31 - 1), t=st.integers(2, 32), d=st.integers(2, 32), s=st.sampled_from(STRATEGIES))
    @settings(max_examples=60, deadline=None)
    def test_shape_contract(self, seed, t, d, s):
        sf, ssl = streams(t, d, seed)
        out, _ = fuse(sf, ssl, params(s, d, seed))
        assert out.shape == (t, d)

    @pytest.mark.parametrize("strategy", FUSION_STRATEGIES)
    def test_batch_matches_single(self, strategy):
        sf, ssl = streams(5, 3, batch=3)
        p = params(strategy, 3)
        batched, _ = fuse(sf, ssl, p)
        for i in range(3):
            single, _ = fuse(Tensor(sf.data[i]), Tensor(ssl.data[i]), p)
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-13)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _input_shape(strategy):
    return (4, 6) if strategy == "concat" else (3, 4)


class TestGradients:
    @pytest.mark.parametrize("strategy", FUSION_STRATEGIES)
    def test_fusion_parameters(self, strategy):
        for seed in range(10):
            t, d = _input_shape(strategy)
            sf, ssl = streams(t, d, seed)
            p = params(strategy, d, seed)
            probe = np.random.default_rng(seed + 100).standard_normal((t, d))
            errs = check_gradients(lambda: weighted_sum(fuse(sf, ssl, p)[0], probe), p.parameters())
            assert max(errs.values()) < TOLERANCE, errs

    @pytest.mark.parametrize("strategy", FUSION_STRATEGIES)
    def test_inputs(self, strategy):
        sf, ssl = streams(3, 4, 5)
        sf.requires_grad = ssl.requires_grad = True
        sf.grad, ssl.grad = np.zeros_like(sf.data), np.zeros_like(ssl.data)
        p = params(strategy, 4, 5)
        probe = np.random.default_rng(6).standard_normal((3, 4))
        errs = check_gradients(lambda: weighted_sum(fuse(sf, ssl, p)[0], probe), [sf, ssl])
        assert max(errs.values()) < TOLERANCE, errs

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_whole_model(self, strategy):
        assert gradcheck_strategy(strategy, seeds=10) < TOLERANCE

    def test_whole_model_unshared_mutual(self):
        assert gradcheck_strategy("mutual", seeds=10, shared_qkv=False) < TOLERANCE

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_no_dead_parameters(self, strategy):
        rng = np.random.default_rng(7)
        use_sf, use_ssl = uses_streams(strategy)
        ap = AlignmentParams.init(5, 6, rng, target_T=4, target_D=3, use_sf=use_sf, use_ssl=use_ssl)
        p = FusionParams.init(strategy, 3, rng, shared_qkv=False)
        sf, ssl = rng.standard_normal((8, 5)), rng.standard_normal((4, 6))
        out, _ = fuse(*align(sf, ssl, ap), p)
        ad.backward(ad.sum(out))
        for w in ap.parameters() + p.parameters():
            assert np.any(w.grad != 0), w.name
