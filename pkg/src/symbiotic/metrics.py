"""Attribute and segmentation evaluation measures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import LabelRangeError, ShapeError, UndefinedMetricError
from .layers import IGNORE_INDEX


def _present(scores, labels, present):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    m = np.ones_like(y) if present is None else np.asarray(present).reshape(-1).astype(bool)
    if not (s.shape == y.shape == m.shape):
        raise ShapeError("scores, labels and present must have the same length")
    return s[m], y[m]


def average_precision(scores, labels, present=None) -> float:
    """Mean of precision@k over the ranks k of the positives (no interpolation).

    Scores are sorted descending; equal scores keep their original order.
    """
    s, y = _present(scores, labels, present)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one present positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def classification_error(scores, labels, present=None, threshold: float = 0.0) -> float:
    s, y = _present(scores, labels, present)
    if s.size == 0:
        raise UndefinedMetricError("classification error needs at least one present label")
    return float(np.mean((s > threshold) != y))


def balanced_accuracy(scores, labels, present=None, threshold: float = 0.0) -> float:
    s, y = _present(scores, labels, present)
    if y.all() or not y.any():
        raise UndefinedMetricError("balanced accuracy needs both classes present")
    pred = s > threshold
    tpr = np.mean(pred[y])
    tnr = np.mean(~pred[~y])
    return float(0.5 * (tpr + tnr))


def seg_confusion(pred, gt, n_labels: int) -> np.ndarray:
    """conf[g, p] = number of pixels with ground truth g predicted as p."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError("prediction and ground truth maps differ in size")
    keep = gt != IGNORE_INDEX
    pred, gt = pred[keep], gt[keep]
    if np.any((gt < 0) | (gt >= n_labels)) or np.any((pred < 0) | (pred >= n_labels)):
        raise LabelRangeError(f"labels must lie in [0, {n_labels}) or be {IGNORE_INDEX}")
    return np.bincount(gt * n_labels + pred, minlength=n_labels * n_labels).reshape(n_labels, n_labels)


def iou_and_class_accuracy(conf):
    """Per-class IoU and accuracy; classes absent from ground truth are left out of the means."""
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1] or np.any(conf < 0):
        raise ShapeError("confusion matrix must be square and non-negative")
    tp = np.diag(conf)
    rows = conf.sum(axis=1)
    cols = conf.sum(axis=0)
    seen = rows > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(seen, tp / (rows + cols - tp), np.nan)
        acc = np.where(seen, tp / rows, np.nan)
    mean_iou = float(np.mean(iou[seen])) if seen.any() else float("nan")
    mean_acc = float(np.mean(acc[seen])) if seen.any() else float("nan")
    return iou, acc, mean_iou, mean_acc


# ---------------------------------------------------------------------------
# reports


@dataclass
class AttributeScore:
    name: str
    ap: Optional[float]
    classification_error: Optional[float]
    balanced_accuracy: Optional[float]


@dataclass
class ClassScore:
    name: str
    iou: Optional[float]
    class_accuracy: Optional[float]


@dataclass
class EvalReport:
    per_attribute: List[AttributeScore] = field(default_factory=list)
    per_class_seg: List[ClassScore] = field(default_factory=list)

    @staticmethod
    def _mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def macro_ap(self):
        return self._mean(a.ap for a in self.per_attribute)

    @property
    def macro_error(self):
        return self._mean(a.classification_error for a in self.per_attribute)

    @property
    def macro_balanced_accuracy(self):
        return self._mean(a.balanced_accuracy for a in self.per_attribute)

    @property
    def mean_iou(self):
        return self._mean(c.iou for c in self.per_class_seg)

    @property
    def mean_class_accuracy(self):
        return self._mean(c.class_accuracy for c in self.per_class_seg)

    def to_dict(self) -> dict:
        def r(v):
            return None if v is None else round(float(v), 5)

        out = {}
        if self.per_attribute:
            out["attributes"] = {
                "per_attribute": [
                    {
                        "name": a.name,
                        "ap": r(a.ap),
                        "classification_error": r(a.classification_error),
                        "balanced_accuracy": r(a.balanced_accuracy),
                    }
                    for a in self.per_attribute
                ],
                "macro": {
                    "ap": r(self.macro_ap),
                    "classification_error": r(self.macro_error),
                    "balanced_accuracy": r(self.macro_balanced_accuracy),
                },
            }
        if self.per_class_seg:
            out["segmentation"] = {
                "per_class": [
                    {"name": c.name, "iou": r(c.iou), "class_accuracy": r(c.class_accuracy)}
                    for c in self.per_class_seg
                ],
                "mean_iou": r(self.mean_iou),
                "mean_class_accuracy": r(self.mean_class_accuracy),
            }
        return out

    def to_json(self) -> str:
        # key order is fixed by construction; no sort_keys so the layout stays readable
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _guarded(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def attribute_scores(
    names: Sequence[str], scores: np.ndarray, labels: np.ndarray, present: np.ndarray
) -> List[AttributeScore]:
    out = []
    for j, name in enumerate(names):
        args = (scores[:, j], labels[:, j], present[:, j])
        out.append(
            AttributeScore(
                name,
                _guarded(average_precision, *args),
                _guarded(classification_error, *args),
                _guarded(balanced_accuracy, *args),
            )
        )
    return out


def class_scores(names: Sequence[str], conf: np.ndarray) -> List[ClassScore]:
    iou, acc, _, _ = iou_and_class_accuracy(conf)
    return [
        ClassScore(n, None if np.isnan(i) else float(i), None if np.isnan(a) else float(a))
        for n, i, a in zip(names, iou, acc)
    ]
