"""Confusion counting, per-class F1 and the boundary-erosion evaluation protocol."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class LabelError(ValueError):
    pass


class EmptyReportError(ValueError):
    pass


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float


@dataclass
class SegmentationReport:
    confusion: np.ndarray  # rows = truth, cols = prediction
    classes: tuple[int, ...]
    per_class: tuple[ClassScore, ...]
    overall_accuracy: float
    average_f1: float
    eroded: bool = False

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        names = class_names or [str(c) for c in self.classes]
        return {
            "overall_accuracy": self.overall_accuracy,
            "average_f1": self.average_f1,
            "eroded": self.eroded,
            "classes": [
                {"id": int(c), "name": n, "precision": s.precision, "recall": s.recall, "f1": s.f1}
                for c, n, s in zip(self.classes, names, self.per_class)
            ],
            "confusion": self.confusion.tolist(),
        }

    def to_json(self, class_names=None) -> str:
        return json.dumps(self.to_dict(class_names), indent=2)

    def table(self, class_names: Sequence[str] | None = None) -> str:
        """One row of per-class F1 followed by OA and average F1, in percent."""
        names = list(class_names or [str(c) for c in self.classes])
        cols = names + ["OA", "Average F1"]
        vals = [s.f1 for s in self.per_class] + [self.overall_accuracy, self.average_f1]
        widths = [max(len(c), 6) for c in cols]
        head = " | ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = " | ".join(f"{100 * v:.1f}".rjust(w) for v, w in zip(vals, widths))
        return f"{head}\n{'-' * len(head)}\n{row}"


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(confusion: np.ndarray, predicted, truth, eval_mask=None) -> np.ndarray:
    """Add the masked (truth, prediction) pairs to ``confusion``; returns a new array."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"prediction {predicted.shape} and truth {truth.shape} differ")
    mask = np.ones(truth.shape, bool) if eval_mask is None else np.asarray(eval_mask, bool)
    if mask.shape != truth.shape:
        raise ValueError(f"mask {mask.shape} does not match maps {truth.shape}")
    k = confusion.shape[0]
    t = truth[mask].astype(np.int64)
    p = predicted[mask].astype(np.int64)
    for name, v in (("truth", t), ("prediction", p)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise LabelError(f"{name} labels outside [0, {k - 1}] inside the evaluation mask")
    return confusion + np.bincount(t * k + p, minlength=k * k).reshape(k, k)


def disk_offsets(radius: float) -> list[tuple[int, int]]:
    r = int(np.floor(radius))
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if (dy, dx) != (0, 0) and dy * dy + dx * dx <= radius * radius]


def erode_boundaries(truth, radius: float = 3) -> np.ndarray:
    """Mask that drops pixels within Euclidean ``radius`` of a differently-labelled pixel.

    The tile border is not a boundary.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    truth = np.asarray(truth)
    h, w = truth.shape
    mask = np.ones((h, w), dtype=bool)
    for dy, dx in disk_offsets(radius):
        # compare pixel (y, x) with (y + dy, x + dx) where both are inside
        ys, yd = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
        xs, xd = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
        mask[ys, xs] &= truth[ys, xs] == truth[yd, xd]
    return mask


def evaluation_mask(truth, radius: float = 3, ignore_value: int | None = None) -> np.ndarray:
    mask = erode_boundaries(truth, radius)
    if ignore_value is not None:
        mask &= np.asarray(truth) != ignore_value
    return mask


def _safe_div(a: float, b: float) -> float:
    return float(a) / float(b) if b else 0.0


def finalize(confusion: np.ndarray, class_subset: Iterable[int] | None = None, eroded: bool = False) -> SegmentationReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    if confusion.sum() == 0:
        raise EmptyReportError("confusion matrix is empty")
    classes = tuple(range(confusion.shape[0])) if class_subset is None else tuple(sorted(class_subset))
    if not classes:
        raise EmptyReportError("no classes to report")
    scores = []
    for c in classes:
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        scores.append(ClassScore(precision, recall, f1))
    oa = _safe_div(np.trace(confusion), confusion.sum())
    avg = float(np.mean([s.f1 for s in scores]))
    return SegmentationReport(confusion, classes, tuple(scores), oa, avg, eroded)


def evaluate_maps(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]],
    num_classes: int,
    erosion_radius: float = 3,
    ignore_value: int | None = 255,
    class_subset=None,
) -> SegmentationReport:
    """Score (prediction, truth) label maps under the erosion protocol."""
    conf = new_confusion(num_classes)
    for pred, truth in pairs:
        mask = evaluation_mask(truth, erosion_radius, ignore_value)
        conf = accumulate(conf, pred, truth, mask)
    return finalize(conf, class_subset, eroded=erosion_radius > 0)
