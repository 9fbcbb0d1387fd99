"""Mini-batch training loop with AdamW, plateau scheduling and best-checkpoint saving."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import AdamW, ReduceLROnPlateau, Tensor, backward, make_rng, no_grad
from .checkpoint import save_checkpoint
from .data import Sample
from .losses import LossBreakdown, LossWeights, total_loss
from .metrics import dice, evaluate_dataset
from .model import BEFUnet


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W, 3]
    masks: np.ndarray  # [B, H, W]
    edges: np.ndarray  # [B, H, W, 1]


def make_batch(samples: Sequence[Sample], dtype=np.float64) -> Batch:
    return Batch(
        np.stack([s.image for s in samples]).astype(dtype),
        np.stack([s.mask for s in samples]).astype(np.int64),
        np.stack([s.edge for s in samples]).astype(np.float64)[..., None],
    )


def iterate_batches(samples: Sequence[Sample], batch_size: int, rng: np.random.Generator | None):
    """Shuffled (if ``rng``) mini-batches; the last one may be smaller."""
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    for i in range(0, len(samples), batch_size):
        yield [samples[j] for j in order[i:i + batch_size]]


def model_dtype(model: BEFUnet):
    return model.decoder.head.weight.dtype


def train_step(model: BEFUnet, opt: AdamW, batch: Batch, weights: LossWeights) -> tuple[LossBreakdown, np.ndarray]:
    """One optimizer step; returns the loss parts and the batch's predicted labels."""
    out = model(Tensor(batch.images.astype(model_dtype(model), copy=False)))
    edges = batch.edges if model.edge is not None and weights.gamma > 0 else None
    parts = total_loss(out, batch.masks, edges, weights)
    loss = parts.total.item()
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} (ce={parts.ce}, dice={parts.dice}, edge={parts.edge}) "
                               f"at optimizer step {opt.step_count + 1}")
    opt.zero_grad()
    backward(parts.total, opt.params)
    opt.step()
    return parts, out.logits.data.argmax(axis=-1)


def evaluate_loss(model: BEFUnet, samples: Sequence[Sample], weights: LossWeights, batch_size: int) -> float:
    """Sample-weighted mean total loss, no gradients recorded."""
    total, n = 0.0, 0
    with no_grad():
        for chunk in iterate_batches(samples, batch_size, None):
            b = make_batch(chunk, model_dtype(model))
            out = model(Tensor(b.images))
            edges = b.edges if model.edge is not None and weights.gamma > 0 else None
            total += total_loss(out, b.masks, edges, weights).total.item() * len(chunk)
            n += len(chunk)
    return total / n


def foreground_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    return float(np.mean([dice(pred == c, gt == c) for c in range(1, num_classes)]))


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    seed: int = 42


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    dice: float

    def csv(self) -> str:
        return f"{self.epoch},{self.split},{self.loss:.6g},{self.dice:.6g}"


def fit(
    model: BEFUnet,
    train: Sequence[Sample],
    val: Sequence[Sample],
    settings: TrainSettings,
    weights: LossWeights,
    checkpoint_path: Path | None = None,
    log: Callable[[EpochRecord], None] | None = None,
) -> list[EpochRecord]:
    """Train for ``settings.epochs``; keep the checkpoint with the best validation Dice.

    Train-split Dice is measured on each batch's predictions as it is
    trained; validation loss drives the plateau scheduler.
    """
    k = model.cfg.num_classes
    rng = make_rng(settings.seed)
    opt = AdamW(model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    sched = ReduceLROnPlateau(opt, settings.plateau_factor, settings.plateau_patience)
    history: list[EpochRecord] = []
    best = -math.inf
    dtype = model_dtype(model)
    for epoch in range(1, settings.epochs + 1):
        losses, dices, count = 0.0, 0.0, 0
        for chunk in iterate_batches(train, settings.batch_size, rng):
            b = make_batch(chunk, dtype)
            parts, pred = train_step(model, opt, b, weights)
            losses += parts.total.item() * len(chunk)
            dices += sum(foreground_dice(p, g, k) for p, g in zip(pred, b.masks))
            count += len(chunk)
        records = [EpochRecord(epoch, "train", losses / count, dices / count)]
        if val:
            val_loss = evaluate_loss(model, val, weights, settings.batch_size)
            val_dice = evaluate_dataset(model.predict, val, k, settings.batch_size).get("dice")
            records.append(EpochRecord(epoch, "val", val_loss, val_dice))
            sched.step(val_loss)
            if val_dice > best:
                best = val_dice
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
        for r in records:
            history.append(r)
            if log is not None:
                log(r)
    if not val and checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return history
