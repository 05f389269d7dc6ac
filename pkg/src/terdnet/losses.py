"""Sequential class-weighted cross-entropy and change-detection metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, _make, add, mul


def class_weights(gt: np.ndarray) -> tuple[float, float]:
    """Balance weights w_i = (n_0 + n_1 - n_i) / (n_0 + n_1) for binary labels.

    The rarer class gets the larger weight; a single-class mask yields (0, 1)
    or (1, 0).
    """
    gt = np.asarray(gt)
    if gt.size == 0:
        raise ValueError("class weights of an empty mask are undefined")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground truth may only contain labels 0 and 1")
    n1 = int(np.count_nonzero(gt))
    n0 = gt.size - n1
    total = n0 + n1
    return (total - n0) / total, (total - n1) / total


def weighted_cross_entropy(logits: Tensor, gt: np.ndarray, weights: tuple[float, float]) -> Tensor:
    """Mean over pixels of ``w[y] * -log softmax(logits)[y]``."""
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"expected (B, 2, H, W) logits, got {logits.shape}")
    gt = np.asarray(gt)
    if gt.ndim == 2:
        gt = gt[None]
    if gt.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"ground truth {gt.shape} does not match logits {logits.shape}")
    d = logits.data
    shifted = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    y = gt.astype(np.intp)
    logp_true = np.take_along_axis(shifted, y[:, None], axis=1)[:, 0] - lse
    w = np.where(y == 1, weights[1], weights[0]).astype(d.dtype)
    n = y.size
    value = np.asarray(-(w * logp_true).sum() / n, dtype=d.dtype)

    def bw(g):
        prob = np.exp(shifted - lse[:, None])
        onehot = np.stack([y == 0, y == 1], axis=1)
        return ((prob - onehot) * (w[:, None] * (g / n)),)

    return _make(value, (logits,), bw, "weighted_cross_entropy")


def iteration_weights(m: int, gamma: float) -> list[float]:
    """γ^(M-k) for k = 1..M; the last iteration has weight 1."""
    return [gamma ** (m - k) for k in range(1, m + 1)]


@dataclass
class LossReport:
    total: Tensor
    per_iteration: list[float]
    gamma: float
    class_weights: tuple[float, float]
    iteration_weights: list[float] = field(default_factory=list)


def sequential_weighted_ce(predictions: list[Tensor], gt: np.ndarray, gamma: float = 0.8,
                           weights: tuple[float, float] | None = None) -> LossReport:
    """Σ_k γ^(M-k) · CE_w(prediction_k, gt), class weights from ``gt`` unless given."""
    if not predictions:
        raise ValueError("need at least one prediction")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if weights is None:
        weights = class_weights(gt)
    iw = iteration_weights(len(predictions), gamma)
    terms = [weighted_cross_entropy(p, gt, weights) for p in predictions]
    total = None
    for wk, term in zip(iw, terms):
        scaled = mul(term, wk)
        total = scaled if total is None else add(total, scaled)
    return LossReport(total, [t.item() for t in terms], gamma, weights, iw)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def of(cls, pred: np.ndarray, gt: np.ndarray) -> Confusion:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        p, g = pred.astype(bool), gt.astype(bool)
        return cls(
            int(np.count_nonzero(p & g)),
            int(np.count_nonzero(p & ~g)),
            int(np.count_nonzero(~p & g)),
            int(np.count_nonzero(~p & ~g)),
        )

    def __add__(self, other: Confusion) -> Confusion:
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def report(self) -> MetricReport:
        return MetricReport.from_counts(self)


def _ratio(num: int, den: int) -> float:
    # nothing to find and nothing predicted counts as perfect
    return 1.0 if den == 0 else num / den


@dataclass
class MetricReport:
    f1_change: float
    iou_static: float
    iou_change: float
    miou: float
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_counts(cls, c: Confusion) -> MetricReport:
        f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
        iou_c = _ratio(c.tp, c.tp + c.fp + c.fn)
        iou_s = _ratio(c.tn, c.tn + c.fn + c.fp)
        return cls(f1, iou_s, iou_c, (iou_s + iou_c) / 2, c.tp, c.fp, c.fn, c.tn)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def evaluate(pred: np.ndarray, gt: np.ndarray) -> MetricReport:
    return Confusion.of(pred, gt).report()
