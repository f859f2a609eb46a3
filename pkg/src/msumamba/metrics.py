"""Pixel-level evaluation: one-vs-rest confusion counts and the
IoU / Dice / precision / sensitivity / specificity report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EvaluationError, ShapeError

METRIC_KEYS = ("IoU", "DC", "SE", "SP", "PRE")
MACRO_KEYS = ("mIoU", "mDC", "mSE", "mSP", "mPRE")


class ConfusionCounts:
    """Per-class TP/FP/FN/TN pixel tallies; supports merge of shards."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ShapeError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)
        self.tn = np.zeros(num_classes, dtype=np.int64)

    @property
    def total_pixels(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge counts with different class counts")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.tn += other.tn
        return self


def confusion_accumulate(pred_indices: np.ndarray, gt_indices: np.ndarray,
                         counts: ConfusionCounts) -> ConfusionCounts:
    """Add one batch of predictions to the tallies (order-independent)."""
    pred = np.asarray(pred_indices)
    gt = np.asarray(gt_indices)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must match")
    k = counts.num_classes
    if pred.size and (pred.min() < 0 or pred.max() >= k or gt.min() < 0 or gt.max() >= k):
        raise ShapeError(f"labels must lie in [0,{k})")
    cm = np.bincount(gt.ravel().astype(np.int64) * k + pred.ravel().astype(np.int64),
                     minlength=k * k).reshape(k, k)
    diag = np.diag(cm)
    total = cm.sum()
    counts.tp += diag
    counts.fp += cm.sum(axis=0) - diag
    counts.fn += cm.sum(axis=1) - diag
    counts.tn += total - (cm.sum(axis=0) + cm.sum(axis=1) - diag)
    return counts


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class MetricReport:
    """Per-class and macro metrics; NaN marks a class whose denominator is empty."""
    class_names: list[str]
    per_class: dict[str, dict[str, float]]      # name -> metric -> fraction (or NaN)
    macro: dict[str, float]                     # mIoU/mDC/mSE/mSP/mPRE fractions
    classes_present: dict[str, bool]            # foreground classes seen in pred or gt

    def to_json_dict(self) -> dict:
        """Flat document; values are percentages rounded to 2 decimals."""
        doc: dict[str, Optional[float]] = {}
        for name in self.class_names[1:]:
            for key in METRIC_KEYS:
                v = self.per_class[name][key]
                doc[f"{name}_{key}"] = None if math.isnan(v) else round(100.0 * v, 2)
        for key, mkey in zip(METRIC_KEYS, MACRO_KEYS):
            v = self.macro[mkey]
            doc[mkey] = None if math.isnan(v) else round(100.0 * v, 2)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    def to_table(self) -> str:
        """Per-structure rows plus a macro row, 2-decimal percentages."""
        doc = self.to_json_dict()

        def cell(v: Optional[float]) -> str:
            return "     -" if v is None else f"{v:6.2f}"

        lines = ["Item   " + "".join(f"{k:>8}" for k in METRIC_KEYS)]
        for name in self.class_names[1:]:
            row = "".join(f"  {cell(doc[f'{name}_{k}'])}" for k in METRIC_KEYS)
            lines.append(f"{name:<7}" + row)
        lines.append("macro  " + "".join(f"  {cell(doc[mk])}" for mk in MACRO_KEYS))
        return "\n".join(lines)


def compute_metrics(counts: ConfusionCounts,
                    class_names: Optional[Sequence[str]] = None) -> MetricReport:
    """Dice, IoU, precision, sensitivity, specificity from pixel counts.

    Classes with an empty denominator get NaN for that metric and are
    excluded from the macro averages; macro averages cover foreground
    classes only.
    """
    k = counts.num_classes
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(k)]
    if len(names) != k:
        raise ShapeError(f"need {k} class names, got {len(names)}")
    tp, fp, fn, tn = (a.astype(np.float64) for a in (counts.tp, counts.fp, counts.fn, counts.tn))
    values = {
        "IoU": _ratio(tp, tp + fp + fn),
        "DC": _ratio(2 * tp, 2 * tp + fp + fn),
        "SE": _ratio(tp, tp + fn),
        "SP": _ratio(tn, tn + fp),
        "PRE": _ratio(tp, tp + fp),
    }
    per_class = {name: {key: float(values[key][i]) for key in METRIC_KEYS}
                 for i, name in enumerate(names)}
    present = (counts.tp + counts.fn + counts.fp) > 0
    classes_present = {name: bool(present[i]) for i, name in enumerate(names) if i > 0}

    macro = {}
    for key, mkey in zip(METRIC_KEYS, MACRO_KEYS):
        fg = values[key][1:]
        fg_present = present[1:]
        usable = fg_present & ~np.isnan(fg)
        macro[mkey] = float(fg[usable].mean()) if usable.any() else float("nan")
    return MetricReport(class_names=names, per_class=per_class, macro=macro,
                        classes_present=classes_present)


def macro_average(report: MetricReport) -> dict[str, float]:
    """Macro fields of a report; errors when no foreground class is present."""
    if not any(report.classes_present.values()):
        raise EvaluationError("no foreground class present in predictions or ground truth")
    return dict(report.macro)
