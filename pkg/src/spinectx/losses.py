"""Composite BCE + Dice loss with analytic gradients, and overlap metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

PROB_CLAMP = 1e-7
DICE_EPS = 1e-5


def _prepare(p, y):
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("loss needs at least one voxel")
    if p.shape != y.shape:
        raise ValueError(f"probabilities {p.shape} and labels {y.shape} differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be exactly 0 or 1")
    return p, y


def bce_loss(p, y, clamp: float = PROB_CLAMP) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``p``.

    ``p`` is clamped to ``[clamp, 1 - clamp]`` before use; the gradient is
    that of the clamped function, so it is zero where the clamp is active.
    """
    p, y = _prepare(p, y)
    n = p.size
    pc = np.clip(p, clamp, 1.0 - clamp)
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)) / n
    grad = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
    grad[(p < clamp) | (p > 1.0 - clamp)] = 0.0
    return float(loss), grad


def dice_loss(p, y, eps: float = DICE_EPS) -> Tuple[float, np.ndarray]:
    """Soft Dice loss ``1 - (2 sum(p y) + eps) / (sum p + sum y + eps)`` and its gradient."""
    p, y = _prepare(p, y)
    inter = np.dot(p, y)
    num = 2.0 * inter + eps
    den = p.sum() + y.sum() + eps
    loss = 1.0 - num / den
    grad = -(2.0 * y * den - num) / (den * den)
    return float(loss), grad


def composite_loss(p, y, eps: float = DICE_EPS,
                   clamp: float = PROB_CLAMP) -> Tuple[float, np.ndarray]:
    lb, gb = bce_loss(p, y, clamp)
    ld, gd = dice_loss(p, y, eps)
    return lb + ld, gb + gd


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class SegMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    dice: float
    iou: float
    precision: float
    recall: float
    f1: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _ratio(num, den, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> SegMetrics:
    """Overlap scores from confusion counts.

    A zero denominator scores 1.0 when prediction and truth are both empty,
    0.0 otherwise.
    """
    empty = tp + fp == 0 and tp + fn == 0
    dice = _ratio(2 * tp, 2 * tp + fp + fn, empty)
    iou = _ratio(tp, tp + fp + fn, empty)
    precision = _ratio(tp, tp + fp, empty)
    recall = _ratio(tp, tp + fn, empty)
    if precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return SegMetrics(int(tp), int(fp), int(fn), int(tn), dice, iou, precision, recall, f1)


def confusion(pred, truth) -> SegMetrics:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} shapes differ")
    p = pred.astype(bool).ravel()
    t = truth.astype(bool).ravel()
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = p.size - tp - fp - fn
    return metrics_from_counts(tp, fp, fn, tn)


CSV_FIELDS = ["case_id", "dice", "iou", "precision", "recall", "f1", "tp", "fp", "fn", "tn"]


def metrics_row(case_id: str, m: SegMetrics) -> dict:
    row = {"case_id": case_id}
    row.update({k: getattr(m, k) for k in CSV_FIELDS[1:]})
    return row


def mean_row(rows: Sequence[dict], case_id: str = "mean") -> dict:
    out = {"case_id": case_id}
    for k in CSV_FIELDS[1:6]:
        out[k] = float(np.mean([r[k] for r in rows])) if rows else float("nan")
    for k in CSV_FIELDS[6:]:
        out[k] = int(sum(r[k] for r in rows))
    return out


def pooled_row(rows: Sequence[dict], case_id: str = "pooled") -> dict:
    """Metrics over the summed confusion counts of all cases."""
    tp, fp, fn, tn = (sum(r[k] for r in rows) for k in ("tp", "fp", "fn", "tn"))
    return metrics_row(case_id, metrics_from_counts(tp, fp, fn, tn))


def write_metrics_csv(rows: Iterable[dict], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
