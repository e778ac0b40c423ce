"""Hard-mask segmentation metrics and cross-fold aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InsufficientFoldsError, ShapeMismatchError

METRIC_NAMES = ("dsc", "miou", "precision", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _as_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def confusion_counts(pred, gt, threshold: float = 0.5) -> ConfusionCounts:
    pred, gt = _as_numpy(pred), _as_numpy(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred >= threshold
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num, den, errors):
    # a zero denominator is perfect only when the matching errors are zero too
    if den == 0:
        return 1.0 if errors == 0 else 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> dict[str, float]:
    return {
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c.fp + c.fn),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, c.fp + c.fn),
        "precision": _ratio(c.tp, c.tp + c.fp, c.fn),
        "recall": _ratio(c.tp, c.tp + c.fn, c.fp),
    }


def evaluate_predictions(preds, gts, threshold: float = 0.5) -> dict[str, float]:
    """Average per-image metrics over a test set; ``miou`` is the mean per-image IoU."""
    per_image = [compute_metrics(confusion_counts(p, g, threshold)) for p, g in zip(preds, gts)]
    if not per_image:
        raise ValueError("no predictions to evaluate")
    return {
        "dsc": float(np.mean([m["dsc"] for m in per_image])),
        "miou": float(np.mean([m["iou"] for m in per_image])),
        "precision": float(np.mean([m["precision"] for m in per_image])),
        "recall": float(np.mean([m["recall"] for m in per_image])),
    }


@dataclass
class MetricReport:
    per_fold: list[dict[str, float]]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    @property
    def n_folds(self):
        return len(self.per_fold)

    def cell(self, metric: str) -> str:
        return format_cell(self.mean[metric], self.std[metric])

    def to_dict(self):
        return {"n_folds": self.n_folds, "per_fold": self.per_fold, "mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, data):
        return cls([dict(f) for f in data["per_fold"]], dict(data["mean"]), dict(data["std"]))


def aggregate_folds(per_fold) -> MetricReport:
    """Mean and sample standard deviation (n - 1) of each metric across folds."""
    per_fold = [{k: float(f[k]) for k in METRIC_NAMES} for f in per_fold]
    if len(per_fold) < 2:
        raise InsufficientFoldsError(f"need at least 2 folds, got {len(per_fold)}")
    mean, std = {}, {}
    for k in METRIC_NAMES:
        values = np.array([f[k] for f in per_fold], dtype=np.float64)
        mean[k] = float(values.mean())
        std[k] = float(values.std(ddof=1))
    return MetricReport(per_fold, mean, std)


def format_cell(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"
