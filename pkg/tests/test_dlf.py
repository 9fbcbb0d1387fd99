import numpy as np
import pytest

from befunet.autograd import ContractError, LayerNorm, OpCounter, Tensor, gradcheck, make_rng, ops
from befunet.dlf import DLF, CrossLevel, make_class_token
from befunet.grid import ConfigError, TokenGrid

from oracles import class_token, layer_norm, level_cross_attention


def level(rng, h, w, d, b=1):
    return TokenGrid(Tensor(rng.standard_normal((b, h * w, d))), (h, w))


def cross_params(c):
    a = c.attn
    return {
        "fw": c.f.weight.data, "fb": c.f.bias.data, "nw": c.norm.weight.data, "nb": c.norm.bias.data,
        "wq": a.q.weight.data, "bq": a.q.bias.data, "wk": a.k.weight.data, "bk": a.k.bias.data,
        "wv": a.v.weight.data, "bv": a.v.bias.data, "wo": a.o.weight.data, "bo": a.o.bias.data,
    }


def perturb(module, r, scale=0.3):
    for p in module.parameters():
        p.data = p.data + scale * r.standard_normal(p.shape)


class TestClassToken:
    def test_identical_tokens(self, rng):
        v = rng.standard_normal(6)
        norm = LayerNorm(6)
        norm.weight.data[:] = rng.standard_normal(6)
        g = TokenGrid(Tensor(np.tile(v, (1, 4, 1))), (2, 2))
        np.testing.assert_allclose(make_class_token(g, norm).data[0],
                                   layer_norm(v, norm.weight.data, norm.bias.data), atol=1e-12)

    def test_two_opposite_tokens(self):
        v = np.array([1.0, -2.0, 3.0, 0.5])
        g = TokenGrid(Tensor(np.stack([v, -v])[None]), (1, 2))
        # by hand: normalise each token, then average
        def norm(t):
            mu = t.mean()
            return (t - mu) / np.sqrt(((t - mu) ** 2).mean() + 1e-5)
        np.testing.assert_allclose(make_class_token(g, LayerNorm(4)).data[0], (norm(v) + norm(-v)) / 2, atol=1e-12)

    def test_random_vs_oracle(self):
        r = np.random.default_rng(2)
        for _ in range(20):
            d = int(r.integers(2, 9))
            g = level(r, int(r.integers(1, 4)), int(r.integers(1, 4)), d)
            norm = LayerNorm(d)
            perturb(norm, r)
            got = make_class_token(g, norm).data[0]
            assert got.shape == (d,)
            np.testing.assert_allclose(got, class_token(g.tokens.data[0], norm.weight.data, norm.bias.data), atol=1e-8)

    def test_empty_grid(self):
        g = TokenGrid(Tensor(np.zeros((1, 0, 4))), (0, 3))
        with pytest.raises(ContractError):
            make_class_token(g, LayerNorm(4))


class TestCrossLevel:
    def test_degenerate_single_matching_token(self):
        d = 4
        c = CrossLevel(make_rng(0), d, d, 1)
        for lin in (c.f, c.attn.q, c.attn.k, c.attn.v, c.attn.o):
            lin.weight.data[:] = np.eye(d)
            lin.bias.data[:] = 0
        cls = np.array([[1.0, -1.0, 2.0, 0.0]])
        other = Tensor(cls[:, None, :].copy())
        y = c.attend(Tensor(cls), other).data
        # two identical keys: uniform attention, output is LN of the token
        assert np.allclose(c.attn.last_attention, 0.5)
        np.testing.assert_allclose(y, cls + layer_norm(cls), atol=1e-12)

    def test_random_vs_oracle(self):
        r = np.random.default_rng(4)
        for _ in range(20):
            heads = int(r.choice([1, 2]))
            d_home, d_other = int(r.integers(1, 5)) * 2, heads * int(r.integers(1, 4))
            c = CrossLevel(make_rng(int(r.integers(1 << 30))), d_home, d_other, heads)
            perturb(c, r)
            cls = r.standard_normal((1, d_home))
            other = r.standard_normal((1, int(r.integers(1, 10)), d_other))
            got = c.attend(Tensor(cls), Tensor(other)).data[0]
            ref = level_cross_attention(cls[0], other[0], heads, cross_params(c))
            np.testing.assert_allclose(got, ref, atol=1e-8, rtol=0)

    def test_single_query_row(self, rng):
        c = CrossLevel(make_rng(0), 4, 8, 2)
        c(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 10, 8))))
        assert c.attn.last_attention.shape == (3, 2, 1, 11)

    def test_op_count_linear_in_other_tokens(self, rng):
        c = CrossLevel(make_rng(0), 8, 16, 2)
        counts = []
        for n in (64, 128):
            with OpCounter() as oc:
                c.attn(Tensor(rng.standard_normal((1, 1, 16))), Tensor(rng.standard_normal((1, n + 1, 16))))
            counts.append(oc.multiply_adds)
        # key/value projections plus a single score row: doubling n doubles the cost
        assert abs(counts[1] / counts[0] - 2) < 0.05 * 2

    def test_dim_mismatch(self, rng):
        c = CrossLevel(make_rng(0), 4, 8, 1)
        with pytest.raises(ConfigError):
            c(Tensor(rng.standard_normal((1, 5))), Tensor(rng.standard_normal((1, 3, 8))))


class TestDLF:
    def test_shapes_preserved(self, rng):
        d = DLF(make_rng(0), 16, 128, 16, 4, heads_s=1, heads_l=8)
        ps, pl = level(rng, 4, 4, 16, b=2), level(rng, 2, 2, 128, b=2)
        zs, zl = d(ps, pl)
        assert zs.shape == ps.shape and zl.shape == pl.shape
        assert zs.tokens.shape == ps.tokens.shape and zl.tokens.shape == pl.tokens.shape
        assert d.cross_s.attn.last_attention.shape == (2, 8, 1, 5)
        assert d.cross_l.attn.last_attention.shape == (2, 1, 1, 17)

    @pytest.mark.parametrize("inject", ["add", "concat-project"])
    def test_inject_modes_shapes(self, inject, rng):
        d = DLF(make_rng(0), 4, 8, 4, 1, inject=inject)
        zs, zl = d(level(rng, 2, 2, 4), level(rng, 1, 1, 8))
        assert zs.shape == (2, 2, 4) and zl.shape == (1, 1, 8)

    def test_zero_back_projection_is_post_encoder(self, rng):
        d = DLF(make_rng(0), 4, 8, 4, 1, heads_s=2, heads_l=2)
        perturb(d, np.random.default_rng(0), 0.1)
        for c in (d.cross_s, d.cross_l):
            c.g.weight.data[:] = 0
            c.g.bias.data[:] = 0
        ps, pl = level(rng, 2, 2, 4), level(rng, 1, 1, 8)
        zs, zl = d(ps, pl)
        (_, ts), (_, tl) = d.encode_levels(ps, pl)
        np.testing.assert_array_equal(zs.tokens.data, ts.data)
        np.testing.assert_array_equal(zl.tokens.data, tl.data)

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            DLF(make_rng(0), 4, 8, 4, 1, depth_s=0)
        with pytest.raises(ConfigError):
            DLF(make_rng(0), 4, 8, 4, 1, inject="stack")
        with pytest.raises(ConfigError):
            DLF(make_rng(0), 4, 6, 4, 1, heads_l=4)

    def test_gradcheck_full_dlf(self, rng):
        d = DLF(make_rng(1), 4, 8, 4, 1, heads_s=2, heads_l=2)
        perturb(d, np.random.default_rng(3), 0.1)
        ps = Tensor(rng.standard_normal((1, 4, 4)), requires_grad=True)
        pl = Tensor(rng.standard_normal((1, 1, 8)), requires_grad=True)
        rs, rl = rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 1, 8))

        def loss():
            zs, zl = d(TokenGrid(ps, (2, 2)), TokenGrid(pl, (1, 1)))
            return ops.add(ops.sum(ops.mul(zs.tokens, rs)), ops.sum(ops.mul(zl.tokens, rl)))

        res = gradcheck(loss, d.parameters() + [ps, pl])
        assert res.passed, res.failures[:3]
