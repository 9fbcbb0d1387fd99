import math

import numpy as np
import pytest

from befunet.autograd import ContractError, ShapeError, Tensor, gradcheck
from befunet.losses import (
    LossWeights,
    bce_loss,
    cross_entropy,
    dice_loss,
    edge_loss,
    multiclass_dice_loss,
    total_loss,
)
from befunet.model import ModelOutput

from oracles import bce_loop, dice_loop, edge_loss_loop, total_loss_oracle


def unit_interval(r, shape):
    return r.uniform(0.02, 0.98, size=shape)


class TestEdgeLoss:
    def test_four_pixel_hand_case(self):
        pred = Tensor(np.full((1, 2, 2, 1), 0.5))
        target = np.array([1.0, 0, 0, 0]).reshape(1, 2, 2, 1)
        got = edge_loss([pred], target, lam=1.1).item()
        # beta = 3/4 negatives, alpha = 1.1 * 0.25
        assert got == pytest.approx(-(0.75 * math.log(0.5) + 3 * 0.275 * math.log(0.5)), abs=1e-12)

    def test_perfect_prediction_near_zero(self):
        target = np.zeros((1, 4, 4, 1))
        target[0, 1:3, 1:3] = 1
        pred = Tensor(np.where(target > 0, 1.0, 0.0))
        assert edge_loss([pred] * 4, target).item() < 1e-4

    def test_ignore_band_gives_zero(self, rng):
        target = rng.uniform(0.01, 0.29, size=(1, 3, 3, 1))
        pred = Tensor(unit_interval(rng, (1, 3, 3, 1)))
        assert edge_loss([pred], target, eta=0.3).item() == 0.0

    def test_matches_loop_oracle(self):
        r = np.random.default_rng(8)
        for _ in range(25):
            shape = (1, int(r.integers(1, 6)), int(r.integers(1, 6)), 1)
            # mixes negatives, ignored band and positives
            target = r.choice([0.0, 0.0, 0.2, 0.4, 1.0], size=shape)
            maps = [unit_interval(r, shape) for _ in range(4)]
            got = edge_loss([Tensor(m) for m in maps], target, 1.1, 0.3).item()
            ref = edge_loss_loop(maps, target, 1.1, 0.3)
            assert got == pytest.approx(ref, abs=1e-8, rel=0)

    def test_permutation_invariant(self, rng):
        target = rng.choice([0.0, 1.0], size=(1, 5, 5, 1))
        pred = unit_interval(rng, (1, 5, 5, 1))
        perm = rng.permutation(25)
        shuffle = lambda a: a.reshape(-1)[perm].reshape(a.shape)
        a = edge_loss([Tensor(pred)], target).item()
        b = edge_loss([Tensor(shuffle(pred))], shuffle(target)).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            edge_loss([Tensor(np.full((1, 2, 2, 1), 0.5))], np.zeros((1, 2, 3, 1)))

    def test_gradcheck(self, rng):
        target = rng.choice([0.0, 0.1, 1.0], size=(1, 3, 3, 1))
        maps = [Tensor(unit_interval(rng, (1, 3, 3, 1)), requires_grad=True) for _ in range(2)]
        assert gradcheck(lambda: edge_loss(maps, target), maps).passed


class TestBce:
    def test_half_is_ln2(self, rng):
        target = rng.integers(0, 2, size=(4, 4)).astype(float)
        assert bce_loss(np.full((4, 4), 0.5), target).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_near_zero(self):
        t = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert bce_loss(t, t).item() < 1e-6

    def test_matches_loop_oracle(self):
        r = np.random.default_rng(9)
        for _ in range(25):
            shape = (int(r.integers(1, 5)), 3)
            pred, target = unit_interval(r, shape), r.uniform(size=shape)
            assert bce_loss(pred, target).item() == pytest.approx(bce_loop(pred, target), abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            bce_loss(np.array([1.5]), np.array([1.0]))

    def test_gradcheck(self, rng):
        p = Tensor(unit_interval(rng, (3, 3)), requires_grad=True)
        t = rng.integers(0, 2, size=(3, 3))
        assert gradcheck(lambda: bce_loss(p, t), [p]).passed


class TestDice:
    def test_perfect_overlap(self):
        t = np.array([1.0, 0, 1, 1])
        assert dice_loss(t, t).item() == pytest.approx(0.0, abs=1e-6)

    def test_disjoint(self):
        assert dice_loss(np.array([1.0, 0, 0, 0]), np.array([0.0, 1, 1, 0])).item() == pytest.approx(1.0, abs=1e-6)

    def test_four_pixel_hand_case(self):
        # 2 * (0.5 + 0.5) / (2 + 2) = 0.5
        got = dice_loss(np.full(4, 0.5), np.array([1.0, 1, 0, 0])).item()
        assert got == pytest.approx(1 - (2.0 + 1e-6) / (4.0 + 1e-6), abs=1e-15)

    def test_symmetric_and_oracle(self):
        r = np.random.default_rng(10)
        for _ in range(25):
            a, b = r.uniform(size=7), r.uniform(size=7)
            assert dice_loss(a, b).item() == pytest.approx(dice_loss(b, a).item(), abs=1e-15)
            assert dice_loss(a, b).item() == pytest.approx(dice_loop(a, b), abs=1e-12)

    def test_gradcheck(self, rng):
        p = Tensor(rng.uniform(size=(2, 3)), requires_grad=True)
        t = rng.integers(0, 2, size=(2, 3)).astype(float)
        assert gradcheck(lambda: dice_loss(p, t), [p]).passed


class TestTotal:
    def test_hand_2x2_two_classes(self):
        logits = np.array([[2.0, -1.0], [0.5, 0.5], [-1.0, 1.0], [0.0, 3.0]])
        mask = np.array([0, 1, 1, 0])
        maps = [np.array([0.9, 0.2, 0.3, 0.6])]
        edge_t = np.array([1.0, 0, 0, 1])
        out = ModelOutput(Tensor(logits.reshape(1, 2, 2, 2)), [Tensor(maps[0].reshape(1, 2, 2, 1))])
        got = total_loss(out, mask.reshape(1, 2, 2), edge_t.reshape(1, 2, 2), LossWeights()).total.item()
        ref = total_loss_oracle(logits, mask, maps, edge_t, 0.6, 0.4, 0.2, 1.1, 0.3)
        assert got == pytest.approx(ref, abs=1e-10)

    def test_random_vs_oracle(self):
        r = np.random.default_rng(12)
        for _ in range(20):
            h, w, k = int(r.integers(1, 5)), int(r.integers(1, 5)), int(r.integers(2, 5))
            logits = r.standard_normal((h * w, k)) * 2
            mask = r.integers(0, k, size=h * w)
            edge_t = r.choice([0.0, 0.1, 1.0], size=h * w)
            maps = [unit_interval(r, h * w) for _ in range(4)]
            wts = LossWeights(*r.uniform(0, 1, size=3), 1.1, 0.3)
            out = ModelOutput(Tensor(logits.reshape(1, h, w, k)), [Tensor(m.reshape(1, h, w, 1)) for m in maps])
            got = total_loss(out, mask.reshape(1, h, w), edge_t.reshape(1, h, w), wts).total.item()
            ref = total_loss_oracle(logits, mask, maps, edge_t, wts.lambda_ce, wts.lambda_dice, wts.gamma, 1.1, 0.3)
            assert got == pytest.approx(ref, abs=1e-8, rel=0)

    def test_gamma_zero_is_body_loss_without_edges(self, rng):
        logits = Tensor(rng.standard_normal((1, 3, 3, 3)))
        mask = rng.integers(0, 3, size=(1, 3, 3))
        out = ModelOutput(logits, [Tensor(np.full((1, 3, 3, 1), 0.5))])
        br = total_loss(out, mask, None, LossWeights(gamma=0.0))
        body = 0.6 * cross_entropy(logits, mask).item() + 0.4 * multiclass_dice_loss(logits, mask).item()
        assert br.edge == 0.0
        assert br.total.item() == pytest.approx(body, abs=1e-14)

    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_ce, w.lambda_dice, w.gamma) == (0.6, 0.4, 0.2)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(gamma=1.5)
        with pytest.raises(ValueError):
            LossWeights(eta=1.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_ce=float("nan"))

    def test_nonnegative_and_finite(self):
        r = np.random.default_rng(13)
        for _ in range(50):
            p = r.uniform(0, 1, size=8)
            t = r.integers(0, 2, size=8).astype(float)
            for v in (bce_loss(p, t).item(), dice_loss(p, t).item(),
                      edge_loss([Tensor(p.reshape(1, 2, 4, 1))], t.reshape(1, 2, 4, 1)).item()):
                assert math.isfinite(v) and v >= 0

    def test_gradcheck_total(self, rng):
        logits = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        side = Tensor(unit_interval(rng, (1, 2, 3, 1)), requires_grad=True)
        mask = rng.integers(0, 3, size=(1, 2, 3))
        edge_t = rng.integers(0, 2, size=(1, 2, 3)).astype(float)
        fn = lambda: total_loss(ModelOutput(logits, [side]), mask, edge_t, LossWeights()).total
        res = gradcheck(fn, [logits, side])
        assert res.passed, res.failures
