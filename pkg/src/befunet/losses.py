"""Training objectives: class-balanced edge loss, BCE, Dice and their weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import ContractError, ShapeError, Tensor, as_tensor, ops

CLAMP = 1e-7
DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 0.6
    lambda_dice: float = 0.4
    gamma: float = 0.2
    edge_lambda: float = 1.1
    eta: float = 0.3

    def __post_init__(self):
        vals = (self.lambda_ce, self.lambda_dice, self.gamma, self.edge_lambda, self.eta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"loss weights must be finite: {self}")
        for name in ("lambda_ce", "lambda_dice", "gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.edge_lambda <= 0 or not 0.0 < self.eta < 1.0:
            raise ValueError(f"need edge_lambda > 0 and 0 < eta < 1: {self}")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(cfg.lambda_ce, cfg.lambda_dice, cfg.gamma, cfg.edge_lambda, cfg.eta)


def _clamped(pred: Tensor) -> Tensor:
    return ops.clip(pred, CLAMP, 1.0 - CLAMP)


def edge_weights(target: np.ndarray, lam: float, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel weights of ``log y`` and ``log(1 - y)``.

    Positives (``t >= eta``) get ``beta``, the fraction of negatives; negatives
    (``t == 0``) get ``alpha = lam * (1 - beta)``; the band ``0 < t < eta`` gets 0.
    """
    pos = target >= eta
    neg = target == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos + n_neg == 0:
        return np.zeros(target.shape), np.zeros(target.shape)
    beta = n_neg / (n_pos + n_neg)
    alpha = lam * (1.0 - beta)
    return beta * pos, alpha * neg


def edge_loss(side_maps: Sequence[Tensor], target: np.ndarray, lam: float = 1.1, eta: float = 0.3) -> Tensor:
    """Negated class-balanced log-likelihood, summed over pixels and maps, averaged over the batch.

    ``side_maps`` are sigmoid outputs ``[B, H, W, 1]``; ``target`` holds the
    consensus edge value per pixel with the same shape.
    """
    target = np.asarray(target, dtype=np.float64)
    w_pos, w_neg = edge_weights(target, lam, eta)
    total = None
    for m in side_maps:
        if m.shape != target.shape:
            raise ShapeError(f"edge map {m.shape} does not match target {target.shape}")
        y = _clamped(m)
        ll = ops.add(ops.mul(ops.log(y), w_pos.astype(m.dtype)),
                     ops.mul(ops.log(ops.sub(1.0, y)), w_neg.astype(m.dtype)))
        term = ops.sum(ll)
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ContractError("edge_loss needs at least one side map")
    return ops.mul(total, -1.0 / target.shape[0])


def bce_loss(pred, target) -> Tensor:
    """Mean over pixels of ``-[(1 - t) log(1 - y) + t log y]``."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: {pred.shape} vs {target.shape}")
    if np.any(pred.data < 0) or np.any(pred.data > 1):
        raise ContractError("bce_loss expects predictions in [0, 1]")
    y = _clamped(pred)
    ll = ops.add(ops.mul(ops.log(ops.sub(1.0, y)), 1.0 - target), ops.mul(ops.log(y), target))
    return ops.mul(ops.mean(ll), -1.0)


def dice_loss(pred, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2 sum(y t) + s) / (sum(y) + sum(t) + s)`` over all entries.

    Either argument may be a Tensor; the formula is symmetric.
    """
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"dice_loss: {pred.shape} vs {target.shape}")
    inter = ops.sum(ops.mul(pred, target))
    total = ops.add(ops.sum(pred), ops.sum(target))
    return ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), smooth), ops.add(total, smooth)))


def one_hot(mask: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= k:
        raise ValueError(f"class indices must lie in [0, {k}), got range [{mask.min()}, {mask.max()}]")
    return np.eye(k, dtype=dtype)[mask]


def cross_entropy(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[true class]``."""
    oh = one_hot(mask, logits.shape[-1], logits.dtype)
    if oh.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} do not match mask {np.shape(mask)}")
    picked = ops.sum(ops.mul(ops.log_softmax(logits, -1), oh), axis=-1)
    return ops.mul(ops.mean(picked), -1.0)


def multiclass_dice_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over classes of the one-vs-rest soft Dice loss of the softmax probabilities."""
    k = logits.shape[-1]
    probs = ops.softmax(logits, -1)
    oh = one_hot(mask, k, logits.dtype)
    losses = [dice_loss(probs[..., c], oh[..., c]) for c in range(k)]
    total = losses[0]
    for item in losses[1:]:
        total = ops.add(total, item)
    return ops.mul(total, 1.0 / k)


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    dice: float
    edge: float


def total_loss(output, mask: np.ndarray, edge_target: np.ndarray | None, weights: LossWeights) -> LossBreakdown:
    """``lambda_ce * CE + lambda_dice * Dice + gamma * edge``.

    The edge term is skipped (exactly zero) when ``gamma`` is 0 or the model
    has no edge branch, so edge targets are then optional.
    """
    ce = cross_entropy(output.logits, mask)
    dice = multiclass_dice_loss(output.logits, mask)
    total = ops.add(ops.mul(ce, weights.lambda_ce), ops.mul(dice, weights.lambda_dice))
    edge_val = 0.0
    if weights.gamma > 0 and output.side_edge_maps:
        if edge_target is None:
            raise ValueError("edge targets are required when gamma > 0 and the edge branch is on")
        target = np.asarray(edge_target, dtype=np.float64)
        if target.ndim == 3:
            target = target[..., None]
        edge = edge_loss(output.side_edge_maps, target, weights.edge_lambda, weights.eta)
        edge_val = edge.item()
        total = ops.add(total, ops.mul(edge, weights.gamma))
    return LossBreakdown(total, ce.item(), dice.item(), edge_val)
