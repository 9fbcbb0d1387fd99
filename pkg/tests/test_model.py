import numpy as np
import pytest

from befunet.autograd import AdamW, Tensor, backward, make_rng
from befunet.checks import check_model, tiny_model_config
from befunet.data import generate_synthetic
from befunet.grid import ConfigError
from befunet.losses import LossWeights, total_loss
from befunet.model import ABLATIONS, BEFUnet, ModelConfig, build_ablation
from befunet.train import make_batch

MODULE_PREFIXES = {"use_edge": "edge.", "use_lcaf": "lcaf.", "use_dlf": "dlf."}


def images(rng, b, h, w):
    return Tensor(rng.random((b, h, w, 3)))


class TestShapes:
    def test_tiny_binary(self, rng):
        m = BEFUnet(ModelConfig(num_classes=2), make_rng(0))
        out = m(images(rng, 2, 64, 64))
        assert out.logits.shape == (2, 64, 64, 2)
        assert len(out.side_edge_maps) == 4
        assert all(s.shape == (2, 64, 64, 1) for s in out.side_edge_maps)
        z = out.logits.data - out.logits.data.max(-1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)

    def test_paper_scale(self, rng):
        cfg = ModelConfig(image_size=(224, 224), base_dim=96, window=7, lca_window=(7, 7),
                          heads=(3, 6, 12, 24), num_classes=9, mlp_ratio=4)
        m = BEFUnet(cfg, make_rng(0))
        out = m(images(rng, 1, 224, 224))
        assert out.logits.shape == (1, 224, 224, 9)
        assert [g.grid for g in m.encode(images(rng, 1, 224, 224))[0]] == [(56, 56), (28, 28), (14, 14), (7, 7)]

    @pytest.mark.parametrize("name", list(ABLATIONS))
    def test_every_ablation_has_the_same_output_shapes(self, rng, name):
        cfg = tiny_model_config(**ABLATIONS[name])
        out = BEFUnet(cfg, make_rng(1))(images(rng, 1, 32, 32))
        assert out.logits.shape == (1, 32, 32, 2)
        assert len(out.side_edge_maps) == (4 if cfg.use_edge else 0)

    def test_non_square(self, rng):
        cfg = tiny_model_config(image_size=(32, 64))
        assert BEFUnet(cfg, make_rng(0))(images(rng, 1, 32, 64)).logits.shape == (1, 32, 64, 2)

    def test_wrong_input_shape(self, rng):
        m = BEFUnet(tiny_model_config(), make_rng(0))
        with pytest.raises(ConfigError):
            m(images(rng, 1, 64, 64))

    def test_predict_labels(self, rng):
        m = BEFUnet(tiny_model_config(num_classes=4), make_rng(0))
        pred = m.predict(rng.random((3, 32, 32, 3)))
        assert pred.shape == (3, 32, 32)
        assert pred.min() >= 0 and pred.max() < 4


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(image_size=(48, 64)),
        dict(window=3),
        dict(heads=(3, 2, 4, 8)),
        dict(lca_window=(3, 2)),
        dict(num_classes=1),
        dict(use_edge=False, use_lcaf=True),
        dict(depths=(2, 2, 2)),
        dict(eta=1.0),
        dict(gamma=-0.1),
        dict(lcaf_residual="nope"),
        dict(dlf_inject="nope"),
        dict(patch=2),
    ])
    def test_rejected_before_build(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_dict_round_trip(self):
        cfg = ModelConfig(num_classes=5, lcaf_residual="sum", dlf_inject="concat-project")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        # JSON turns tuples into lists
        d = cfg.to_dict()
        d["depths"] = list(d["depths"])
        assert ModelConfig.from_dict(d) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"nope": 1})


class TestAblations:
    def names(self, **toggles):
        return set(dict(build_ablation(tiny_model_config(), rng=make_rng(0), **toggles).named_parameters()))

    def test_parameter_sets_differ_exactly_as_toggled(self):
        base = self.names(edge=False, lcaf=False, dlf=False)
        for name, toggles in ABLATIONS.items():
            got = self.names(edge=toggles["use_edge"], lcaf=toggles["use_lcaf"], dlf=toggles["use_dlf"])
            assert base <= got, name
            extra = got - base
            for flag, prefix in MODULE_PREFIXES.items():
                owned = {n for n in extra if n.startswith(prefix)}
                assert bool(owned) == toggles[flag], (name, flag)
            assert all(any(n.startswith(p) for p in MODULE_PREFIXES.values()) for n in extra), name

    def test_baseline_excludes_fusion_tensors(self):
        base = self.names(edge=False, lcaf=False, dlf=False)
        assert not any(n.startswith(("edge.", "lcaf.", "dlf.")) for n in base)

    def test_lcaf_without_edge_rejected(self):
        with pytest.raises(ConfigError):
            build_ablation(tiny_model_config(), edge=False, lcaf=True, dlf=False)

    def test_full_toggle_set_is_the_full_model(self, rng):
        cfg = tiny_model_config()
        x = images(rng, 1, 32, 32)
        a = build_ablation(cfg, edge=True, lcaf=True, dlf=True, rng=make_rng(3))
        b = BEFUnet(cfg, make_rng(3))
        np.testing.assert_array_equal(a(x).logits.data, b(x).logits.data)

    def test_body_only_has_no_edge_term(self):
        cfg = tiny_model_config(use_edge=False, use_lcaf=False)
        m = BEFUnet(cfg, make_rng(0))
        s = generate_synthetic(2, 32, 32, 2, seed=0)
        b = make_batch(s)
        parts = total_loss(m(Tensor(b.images)), b.masks, b.edges, LossWeights.from_config(cfg))
        assert parts.edge == 0.0
        assert parts.total.item() == pytest.approx(cfg.lambda_ce * parts.ce + cfg.lambda_dice * parts.dice)

    def test_summation_fusion_uses_both_branches(self, rng):
        m = BEFUnet(tiny_model_config(use_lcaf=False), make_rng(0))
        x = images(rng, 1, 32, 32)
        before = m(x).logits.data
        for p in m.edge.parameters():
            p.data = p.data * 1.5
        assert not np.array_equal(before, m(x).logits.data)


class TestBehaviour:
    def test_deterministic(self, rng):
        x = images(rng, 2, 32, 32)
        a = BEFUnet(tiny_model_config(), make_rng(7))
        b = BEFUnet(tiny_model_config(), make_rng(7))
        np.testing.assert_array_equal(a(x).logits.data, a(x).logits.data)
        np.testing.assert_array_equal(a(x).logits.data, b(x).logits.data)

    def test_end_to_end_gradcheck(self):
        (_, res), = check_model(1e-5, 1e-4, per_input=2)
        assert res.passed, res.worst

    def test_every_parameter_receives_gradient(self):
        # at 32x32 the deepest grid is one token: its attention softmax is
        # constant and pixel differences vanish, so use 64x64
        cfg = tiny_model_config(image_size=(64, 64))
        m = BEFUnet(cfg, make_rng(0))
        b = make_batch(generate_synthetic(2, 64, 64, 2, seed=1))
        loss = total_loss(m(Tensor(b.images)), b.masks, b.edges, LossWeights.from_config(cfg)).total
        params = dict(m.named_parameters())
        backward(loss, list(params.values()))
        dead = [n for n, p in params.items() if p.grad is None or not np.any(p.grad)]
        assert not dead
        assert all(np.isfinite(p.grad).all() for p in params.values())

    @pytest.mark.parametrize("seed", range(5))
    def test_small_step_decreases_loss(self, seed):
        cfg = ModelConfig()
        m = BEFUnet(cfg, make_rng(seed))
        b = make_batch(generate_synthetic(4, 64, 64, 3, seed=100 + seed))
        weights = LossWeights.from_config(cfg)
        opt = AdamW(m.parameters(), lr=1e-4, weight_decay=0.01)

        def loss():
            return total_loss(m(Tensor(b.images)), b.masks, b.edges, weights).total

        first = loss()
        backward(first, opt.params)
        opt.step()
        assert loss().item() < first.item()
