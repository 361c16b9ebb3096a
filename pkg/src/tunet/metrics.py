"""Binarisation and the five segmentation metrics (mIoU, Dice, accuracy, precision, recall)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import values
from .errors import ContractError, ValidationError

CSV_HEADER = "epoch,split,loss,miou,dice,pixel_acc,precision,recall"


def binarize(prob, threshold: float = 0.8) -> np.ndarray:
    """1 where ``prob > threshold`` (strict), else 0, as uint8."""
    p = values(prob)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValidationError("binarize: probabilities must lie in [0, 1]")
    return (p > threshold).astype(np.uint8)


def _as_binary(mask, what: str) -> np.ndarray:
    m = values(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValidationError(f"{what} mask is not binary")
    return m.astype(bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def confusion(pred, gt) -> ConfusionCounts:
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ValidationError(f"confusion: shapes differ, {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


@dataclass(frozen=True)
class MetricsReport:
    miou: float
    dice: float
    pixel_acc: float
    precision: float
    recall: float
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)

    def csv_row(self, epoch: int, split: str, loss: float) -> str:
        values = (loss, self.miou, self.dice, self.pixel_acc, self.precision, self.recall)
        return f"{epoch},{split}," + ",".join(f"{v:.6f}" for v in values)


def _ratio(num: int, den: int, class_absent: bool) -> float:
    # 0/0 only happens when a class is missing from pred or gt; it scores 1
    # when missing from both, 0 otherwise.
    if den == 0:
        return 1.0 if class_absent else 0.0
    return num / den


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    """Derive all metrics from pooled counts.

    mIoU averages the foreground and background IoU.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    total = counts.total
    if total <= 0:
        raise ContractError("compute_metrics: no pixels counted")
    fg_absent = tp + fp + fn == 0
    bg_absent = tn + fp + fn == 0
    precision = _ratio(tp, tp + fp, fg_absent)
    recall = _ratio(tp, tp + fn, fg_absent)
    dice = _ratio(2 * tp, 2 * tp + fp + fn, fg_absent)
    iou_fg = _ratio(tp, tp + fp + fn, fg_absent)
    iou_bg = _ratio(tn, tn + fp + fn, bg_absent)
    return MetricsReport(
        miou=0.5 * (iou_fg + iou_bg),
        dice=dice,
        pixel_acc=(tp + tn) / total,
        precision=precision,
        recall=recall,
        counts=counts,
    )


def pooled_counts(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> ConfusionCounts:
    total = ConfusionCounts()
    for pred, gt in pairs:
        total = total + confusion(pred, gt)
    return total


def evaluate(params, config, samples, threshold: float = 0.8) -> MetricsReport:
    """Micro-averaged metrics of a model over ``samples``.

    Counts are pooled over every image before the metrics are computed once.
    """
    from .autodiff import no_grad
    from .model import forward

    samples = list(samples)
    if not samples:
        raise ContractError("evaluate: empty split")
    counts = ConfusionCounts()
    with no_grad():
        for sample in samples:
            prob = forward(sample.image, params, config)
            counts = counts + confusion(binarize(prob, threshold), sample.mask)
    return compute_metrics(counts)
