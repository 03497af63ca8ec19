"""Building-class IoU and pixel accuracy, per region and pooled."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OVERALL = "overall"


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: Confusion) -> Confusion:
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _binary(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{what} must be binary {{0, 1}}")
    return arr.astype(bool)


class MetricAccumulator:
    """Per-region confusion counts over the building class."""

    def __init__(self):
        self.counts: dict[str, Confusion] = {}

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, region: str = "") -> MetricAccumulator:
        if np.shape(pred) != np.shape(gt):
            raise ValueError(f"prediction {np.shape(pred)} and ground truth {np.shape(gt)} differ in shape")
        p, g = _binary(pred, "prediction"), _binary(gt, "ground truth")
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        tn = p.size - tp - fp - fn
        self.counts[region] = self.counts.get(region, Confusion()) + Confusion(tp, fp, fn, tn)
        return self

    def merge(self, other: MetricAccumulator) -> MetricAccumulator:
        for region, c in other.counts.items():
            self.counts[region] = self.counts.get(region, Confusion()) + c
        return self

    @property
    def regions(self) -> list[str]:
        return sorted(self.counts)

    def confusion(self, region: str = OVERALL) -> Confusion:
        if region == OVERALL:
            total = Confusion()
            for c in self.counts.values():
                total = total + c
            return total
        if region not in self.counts:
            raise KeyError(f"no counts for region {region!r}")
        return self.counts[region]

    def iou(self, region: str = OVERALL) -> float | None:
        """tp / (tp + fp + fn); ``None`` when no building pixel appears in either raster."""
        c = self.confusion(region)
        denom = c.tp + c.fp + c.fn
        return None if denom == 0 else c.tp / denom

    def accuracy(self, region: str = OVERALL) -> float:
        c = self.confusion(region)
        if c.total == 0:
            raise ValueError("accuracy of an empty accumulator is undefined")
        return (c.tp + c.tn) / c.total

    def report(self) -> str:
        """Fixed-column table followed by key=value lines."""
        rows = self.regions + [OVERALL]
        fmt = lambda v: "n/a" if v is None else f"{100 * v:.2f}"
        lines = [f"{'region':<12}{'IoU':>8}{'Acc':>8}"]
        lines += [f"{r:<12}{fmt(self.iou(r)):>8}{fmt(self.accuracy(r)):>8}" for r in rows]
        for r in rows:
            lines.append(f"iou.{r}={fmt(self.iou(r))}")
            lines.append(f"acc.{r}={fmt(self.accuracy(r))}")
        return "\n".join(lines)


def accumulate(acc: MetricAccumulator, pred, gt, region: str = "") -> MetricAccumulator:
    return acc.accumulate(pred, gt, region)


def iou(acc: MetricAccumulator, region: str = OVERALL) -> float | None:
    return acc.iou(region)


def accuracy(acc: MetricAccumulator, region: str = OVERALL) -> float:
    return acc.accuracy(region)
