import zlib

import numpy as np
import pytest

from befunet.autograd import OpCounter, ShapeError, Tensor, gradcheck, make_rng, ops
from befunet.grid import ConfigError, TokenGrid
from befunet.lcaf import LCAF, LcafConfig, attention_cost, local_cross_attention

from oracles import lcaf_oracle, lca_window_loop, masked_global_cross_attention


def grid_pair(rng, h, w, d, b=1):
    e = TokenGrid(Tensor(rng.standard_normal((b, h * w, d))), (h, w))
    t = TokenGrid(Tensor(rng.standard_normal((b, h * w, d))), (h, w))
    return e, t


def lcaf_params(m):
    return {
        "wq": m.wq.weight.data, "wk": m.wk.weight.data, "wv": m.wv.weight.data, "wo": m.wo.weight.data,
        "f1w": m.ffn.fc1.weight.data, "f1b": m.ffn.fc1.bias.data,
        "f2w": m.ffn.fc2.weight.data, "f2b": m.ffn.fc2.bias.data,
    }


def random_case(r):
    hl, wl = (int(v) for v in r.choice([1, 2, 3], size=2))
    h, w = hl * int(r.integers(1, 4)), wl * int(r.integers(1, 4))
    heads = int(r.choice([1, 2, 3]))
    d = heads * int(r.integers(1, 4))
    return h, w, hl, wl, heads, d


class TestLocalCrossAttention:
    def test_singleton_window_is_value_projection(self, rng):
        e, b = grid_pair(rng, 3, 4, 6)
        w = [Tensor(rng.standard_normal((6, 6))) for _ in range(3)]
        out, attn = local_cross_attention(e, b, *w, LcafConfig((1, 1), 2))
        np.testing.assert_array_equal(attn.data, 1.0)
        np.testing.assert_allclose(out.tokens.data, b.tokens.data @ w[2].data, atol=1e-12)

    def test_self_attention_with_identity_projections(self, rng):
        _, b = grid_pair(rng, 2, 2, 4)
        eye = Tensor(np.eye(4))
        out, _ = local_cross_attention(b, b, eye, eye, eye, LcafConfig((2, 2), 1))
        x = b.tokens.data[0]
        s = x @ x.T / 2.0
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        np.testing.assert_allclose(out.tokens.data[0], p @ x, atol=1e-12)

    def test_matches_window_loop_and_masked_global(self):
        r = np.random.default_rng(21)
        for _ in range(25):
            h, w, hl, wl, heads, d = random_case(r)
            e, b = grid_pair(r, h, w, d)
            wq, wk, wv = (r.standard_normal((d, d)) for _ in range(3))
            out, _ = local_cross_attention(e, b, Tensor(wq), Tensor(wk), Tensor(wv), LcafConfig((hl, wl), heads))
            args = (e.tokens.data[0], b.tokens.data[0], (h, w), hl, wl, heads, wq, wk, wv)
            np.testing.assert_allclose(out.tokens.data[0], lca_window_loop(*args), atol=1e-8, rtol=0)
            np.testing.assert_allclose(out.tokens.data[0], masked_global_cross_attention(*args), atol=1e-8, rtol=0)

    def test_rows_stochastic(self, rng):
        m = LCAF(make_rng(0), 8, (4, 4), (2, 2), 2)
        m(*grid_pair(rng, 4, 4, 8, b=2))
        a = m.last_attention
        assert a.shape == (2 * 4, 2, 4, 4)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)

    def test_modality_shape_mismatch(self, rng):
        e, _ = grid_pair(rng, 2, 2, 4)
        _, b = grid_pair(rng, 2, 2, 6)
        w = Tensor(np.eye(4))
        with pytest.raises(ShapeError):
            local_cross_attention(e, b, w, w, w, LcafConfig((1, 1), 1))


class TestMultiHeadAndFusion:
    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            LCAF(make_rng(0), 6, (2, 2), (2, 2), 4)

    def test_grid_must_divide_window(self):
        with pytest.raises(ConfigError):
            LCAF(make_rng(0), 4, (3, 4), (2, 2), 1)

    def test_window_clamped_to_grid(self):
        m = LCAF(make_rng(0), 4, (1, 1), (2, 2), 1)
        assert m.cfg.window == (1, 1)

    def test_single_head_is_lca_then_projection(self, rng):
        m = LCAF(make_rng(0), 4, (2, 2), (2, 2), 1)
        e, b = grid_pair(rng, 2, 2, 4)
        lca, _ = local_cross_attention(e, b, m.wq.weight, m.wk.weight, m.wv.weight, m.cfg)
        got = m.m_lca(e, b).tokens.data
        np.testing.assert_allclose(got, b.tokens.data + lca.tokens.data @ m.wo.weight.data, atol=1e-12)

    def test_zero_output_projection_is_residual(self, rng):
        e, b = grid_pair(rng, 4, 4, 6)
        for residual, ref in (("body", b.tokens.data), ("edge", e.tokens.data), ("sum", e.tokens.data + b.tokens.data)):
            m = LCAF(make_rng(0), 6, (4, 4), (2, 2), 3, residual=residual)
            m.wo.weight.data[:] = 0
            np.testing.assert_array_equal(m.m_lca(e, b).tokens.data, ref)

    def test_zero_ffn_output_is_mlca(self, rng):
        m = LCAF(make_rng(0), 4, (2, 2), (1, 2), 2)
        m.ffn.fc2.weight.data[:] = 0
        e, b = grid_pair(rng, 2, 2, 4)
        np.testing.assert_array_equal(m(e, b).tokens.data, m.m_lca(e, b).tokens.data)

    def test_unknown_residual(self):
        with pytest.raises(ConfigError):
            LCAF(make_rng(0), 4, (2, 2), (2, 2), 1, residual="both")

    @pytest.mark.parametrize("residual", ["body", "edge", "sum"])
    def test_matches_straight_line_oracle(self, residual):
        r = np.random.default_rng(zlib.crc32(residual.encode()))
        for _ in range(20):
            h, w, hl, wl, heads, d = random_case(r)
            m = LCAF(make_rng(int(r.integers(1 << 30))), d, (h, w), (hl, wl), heads, residual=residual)
            for p in m.parameters():
                p.data = p.data + 0.3 * r.standard_normal(p.shape)
            e, b = grid_pair(r, h, w, d)
            ref = lcaf_oracle(e.tokens.data[0], b.tokens.data[0], (h, w), hl, wl, heads, lcaf_params(m), residual)
            np.testing.assert_allclose(m(e, b).tokens.data[0], ref, atol=1e-8, rtol=0)

    def test_gradcheck_projections_and_inputs(self, rng):
        m = LCAF(make_rng(3), 4, (2, 4), (2, 2), 2)
        e = Tensor(rng.standard_normal((1, 8, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 8, 4)), requires_grad=True)
        r = rng.standard_normal((1, 8, 4))

        def loss():
            out = m(TokenGrid(e, (2, 4)), TokenGrid(b, (2, 4)))
            return ops.sum(ops.mul(out.tokens, r))

        res = gradcheck(loss, m.parameters() + [e, b])
        assert res.passed, res.failures[:3]


class TestAttentionCost:
    def test_reference_values(self):
        assert attention_cost(14, 14, 96, 7, 7) == (14_601_216, 9_069_312)

    def test_full_window_equals_global(self):
        g, l = attention_cost(6, 10, 8, 6, 10)
        assert g == l

    def test_local_never_exceeds_global(self):
        r = np.random.default_rng(0)
        for _ in range(1000):
            h, w, c = (int(v) for v in r.integers(1, 64, size=3))
            hl, wl = int(r.integers(1, h + 1)), int(r.integers(1, w + 1))
            g, l = attention_cost(h, w, c, hl, wl)
            assert l <= g

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            attention_cost(0, 14, 96, 7, 7)

    @pytest.mark.parametrize("h,w,c,hl,wl,heads", [(8, 8, 16, 2, 2, 2), (14, 14, 12, 7, 7, 3), (6, 12, 8, 3, 2, 1)])
    def test_counted_ops_match_formula(self, h, w, c, hl, wl, heads, rng):
        m = LCAF(make_rng(0), c, (h, w), (hl, wl), heads)
        e, b = grid_pair(rng, h, w, c)
        with OpCounter() as oc:
            m.m_lca(e, b)
        _, formula = attention_cost(h, w, c, hl, wl)
        assert abs(oc.multiply_adds - formula) <= 0.1 * formula

    def test_counted_cost_linear_in_tokens(self, rng):
        per_token = []
        for h in (8, 16):
            m = LCAF(make_rng(0), 8, (h, 8), (2, 2), 2)
            e, b = grid_pair(rng, h, 8, 8)
            with OpCounter() as oc:
                m.cross_attention(e, b)
            per_token.append(oc.multiply_adds / (h * 8))
        assert abs(per_token[1] / per_token[0] - 1) < 0.05
