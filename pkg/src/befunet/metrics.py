"""Segmentation metrics: overlap ratios, Hausdorff distances, dataset reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .autograd import ShapeError

RATIO_METRICS = ("dice", "iou", "se", "sp", "acc")
REPORT_METRICS = ("dice", "hd95", "hd", "iou", "se", "sp", "acc")


class UndefinedMetricError(ValueError):
    """The metric has no value for these inputs (e.g. Hausdorff of an empty mask)."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _check_pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> float:
    # a zero denominator means nothing could go wrong: count it as agreement
    return num / den if den else 1.0


def dice(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def iou(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def se(pred, gt) -> float:
    """Sensitivity (recall of the foreground)."""
    c = confusion(pred, gt)
    return _ratio(c.tp, c.tp + c.fn)


def sp(pred, gt) -> float:
    """Specificity (recall of the background)."""
    c = confusion(pred, gt)
    return _ratio(c.tn, c.tn + c.fp)


def acc(pred, gt) -> float:
    c = confusion(pred, gt)
    return (c.tp + c.tn) / c.total


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """``[n, 2]`` coordinates of mask pixels with a non-mask 8-neighbour or on the image border."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool), border_value=0)
    return np.argwhere(mask & ~inner)


def _directed(src: np.ndarray, dst_mask: np.ndarray) -> np.ndarray:
    """Distance from each boundary pixel of ``src`` to the nearest boundary pixel of ``dst``."""
    dst_edge = np.zeros(dst_mask.shape, dtype=bool)
    pts = boundary_points(dst_mask)
    dst_edge[pts[:, 0], pts[:, 1]] = True
    dist = ndimage.distance_transform_edt(~dst_edge)
    src_pts = boundary_points(src)
    return dist[src_pts[:, 0], src_pts[:, 1]]


def hausdorff(pred, gt, percentile: float = 100) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in pixels.

    ``percentile=100`` gives the maximum; other values take that percentile
    of the pooled directed distances (95 gives HD95).
    """
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise UndefinedMetricError("Hausdorff distance needs two non-empty masks")
    d_pg, d_gp = _directed(pred, gt), _directed(gt, pred)
    if percentile == 100:
        return float(max(d_pg.max(), d_gp.max()))
    return float(np.percentile(np.hstack([d_pg, d_gp]), percentile))


def class_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray, cls: int) -> dict[str, float]:
    """All report metrics for one class of one sample; undefined distances are NaN."""
    p, g = pred_labels == cls, gt_labels == cls
    out = {"dice": dice(p, g), "iou": iou(p, g), "se": se(p, g), "sp": sp(p, g), "acc": acc(p, g)}
    try:
        out["hd95"] = hausdorff(p, g, 95)
        out["hd"] = hausdorff(p, g, 100)
    except UndefinedMetricError:
        out["hd95"] = out["hd"] = math.nan
    return out


@dataclass
class MetricTable:
    """Per-class means over samples plus a ``mean`` row over the foreground classes."""

    classes: list[str]
    values: dict[str, dict[str, float]] = field(default_factory=dict)  # class -> metric -> value

    def get(self, metric: str, cls: str = "mean") -> float:
        return self.values[cls][metric]

    def format_table(self) -> str:
        header = f"{'class':<8}" + "".join(f"{m:>10}" for m in REPORT_METRICS)
        lines = [header]
        for c in self.classes + ["mean"]:
            row = f"{c:<8}"
            for m in REPORT_METRICS:
                v = self.values[c][m]
                row += f"{'-':>10}" if math.isnan(v) else f"{v:>10.4f}"
            lines.append(row)
        return "\n".join(lines)

    def format_lines(self) -> str:
        """Machine-readable ``metric,class,value`` lines; missing values are written as ``nan``."""
        out = []
        for c in self.classes + ["mean"]:
            for m in REPORT_METRICS:
                out.append(f"{m},{c},{self.values[c][m]:.6g}")
        return "\n".join(out)

    def report(self) -> str:
        return self.format_table() + "\n\n" + self.format_lines() + "\n"


def _nanmean(xs: Sequence[float]) -> float:
    vals = [x for x in xs if not math.isnan(x)]
    return float(np.mean(vals)) if vals else math.nan


def tabulate(pairs: Sequence[tuple[np.ndarray, np.ndarray]], num_classes: int) -> MetricTable:
    """Metric table from ``(pred_labels, gt_labels)`` pairs, classes ``1 .. K-1``."""
    if not pairs:
        raise ValueError("cannot evaluate an empty dataset")
    classes = [str(c) for c in range(1, num_classes)]
    per_class = {c: {m: [] for m in REPORT_METRICS} for c in classes}
    for pred, gt in pairs:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        for c in classes:
            for m, v in class_metrics(pred, gt, int(c)).items():
                per_class[c][m].append(v)
    table = MetricTable(classes)
    for c in classes:
        table.values[c] = {m: _nanmean(per_class[c][m]) for m in REPORT_METRICS}
    table.values["mean"] = {m: _nanmean([table.values[c][m] for c in classes]) for m in REPORT_METRICS}
    return table


def evaluate_dataset(predict: Callable[[np.ndarray], np.ndarray], samples, num_classes: int,
                     batch_size: int = 8) -> MetricTable:
    """Run ``predict`` (images ``[B, H, W, 3]`` -> labels ``[B, H, W]``) over samples in order."""
    samples = list(samples)
    pairs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        preds = predict(np.stack([s.image for s in chunk]))
        pairs.extend((p, s.mask) for p, s in zip(preds, chunk))
    return tabulate(pairs, num_classes)
