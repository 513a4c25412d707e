"""Dice loss, the two-output joint loss and its balance schedule, evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, make_result

DICE_EPS = 1e-7


def dice_loss(y, y_hat) -> Tensor:
    """Soft Dice loss ``1 - (2*sum(y*y_hat) + eps) / (sum(y_hat) + sum(y) + eps)``.

    ``y`` is a fixed binary target (array or Tensor, never differentiated);
    ``y_hat`` may be a Tensor or a plain array of probabilities.
    """
    yv = y.data if isinstance(y, Tensor) else np.asarray(y)
    if not isinstance(y_hat, Tensor):
        y_hat = Tensor(np.asarray(y_hat, dtype=np.float64), dtype=np.float64)
    p = y_hat.data
    if yv.shape != p.shape:
        raise ShapeError(f"dice_loss: target {yv.shape} and prediction {p.shape} differ")
    yv = yv.astype(np.float64, copy=False)
    inter = float((yv * p).sum(dtype=np.float64))
    denom = float(p.sum(dtype=np.float64)) + float(yv.sum())
    num = 2.0 * inter + DICE_EPS
    den = denom + DICE_EPS
    loss = 1.0 - num / den

    def _back(g):
        # d/dp_k = -(2*y_k*den - num) / den**2
        grad = -(2.0 * yv * den - num) / den**2
        return ((g[0] * grad).astype(p.dtype, copy=False),)

    return make_result(np.asarray([loss], dtype=p.dtype), (y_hat,), _back, "dice_loss")


def joint_loss(y, y_hat: Tensor, y_hat_aux: Tensor, c: float) -> Tensor:
    """``c * dice(y, y_hat_aux) + (1 - c) * dice(y, y_hat)``."""
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"balance c must lie in [0, 1], got {c}")
    return dice_loss(y, y_hat_aux) * c + dice_loss(y, y_hat) * (1.0 - c)


@dataclass(frozen=True)
class BalanceSchedule:
    """Balance weight ``c`` used during epoch ``epoch`` (1-based)."""

    c: float = 0.99
    epoch: int = 1


def advance_balance(s: BalanceSchedule) -> BalanceSchedule:
    if s.epoch < 1:
        raise ValueError("epochs are counted from 1")
    return BalanceSchedule(s.c * 0.99 ** s.epoch, s.epoch + 1)


def balance_at(epoch: int) -> float:
    s = BalanceSchedule()
    while s.epoch < epoch:
        s = advance_balance(s)
    return s.c


def threshold_mask(y_hat) -> np.ndarray:
    """Foreground where the probability is at least 0.5."""
    p = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat)
    return (p >= 0.5).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _ratio(num: int, den: int) -> float:
    # an absent class that is also never predicted scores 1
    return 1.0 if den == 0 else num / den


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    ma: float
    iu: float
    dc: float

    @classmethod
    def from_counts(cls, k: ConfusionCounts) -> MetricsReport:
        ma = 0.5 * (_ratio(k.tn, k.tn + k.fp) + _ratio(k.tp, k.tp + k.fn))
        iu = 0.5 * (_ratio(k.tn, k.tn + k.fp + k.fn) + _ratio(k.tp, k.tp + k.fn + k.fp))
        dc = _ratio(2 * k.tp, 2 * k.tp + k.fn + k.fp)
        return cls(k, ma, iu, dc)

    def as_record(self) -> str:
        """Flat ``name=value`` lines, six decimals for the metrics."""
        k = self.counts
        lines = [f"TP={k.tp}", f"TN={k.tn}", f"FP={k.fp}", f"FN={k.fn}",
                 f"MA={self.ma:.6f}", f"IU={self.iu:.6f}", f"DC={self.dc:.6f}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text: str) -> MetricsReport:
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        counts = ConfusionCounts(int(kv["TP"]), int(kv["TN"]), int(kv["FP"]), int(kv["FN"]))
        return cls(counts, float(kv["MA"]), float(kv["IU"]), float(kv["DC"]))


def confusion(y, mask) -> ConfusionCounts:
    yv = np.asarray(y).astype(bool)
    mv = np.asarray(mask).astype(bool)
    if yv.shape != mv.shape:
        raise ShapeError(f"evaluate: truth {yv.shape} and mask {mv.shape} differ")
    tp = int(np.count_nonzero(yv & mv))
    fp = int(np.count_nonzero(~yv & mv))
    fn = int(np.count_nonzero(yv & ~mv))
    return ConfusionCounts(tp, yv.size - tp - fp - fn, fp, fn)


def evaluate(y, mask) -> MetricsReport:
    return MetricsReport.from_counts(confusion(y, mask))


def aggregate(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation (ddof=1) per metric."""
    out = {}
    for name in ("ma", "iu", "dc"):
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        # identical values give exactly zero spread, not rounding residue
        std = float(vals.std(ddof=1)) if len(vals) > 1 and np.ptp(vals) > 0 else 0.0
        out[name] = (float(vals.mean()), std)
    return out
