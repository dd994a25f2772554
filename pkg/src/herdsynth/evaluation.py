"""Precision, recall and F1 from prediction files scored against ground truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset_io import LabelKind, LabelSet, Prediction, Quad, read_labels, read_predictions, write_text
from .geometry import AxisBox, convex_hull, iou_axis, polygon_iou

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsReport:
    true_positives: int
    false_positives: int
    false_negatives: int
    precision: float
    recall: float
    f1: float
    iou_threshold: float = 0.5
    images: int = 0

    def to_text(self) -> str:
        return (
            f"images            {self.images}\n"
            f"iou threshold     {self.iou_threshold:g}\n"
            f"true positives    {self.true_positives}\n"
            f"false positives   {self.false_positives}\n"
            f"false negatives   {self.false_negatives}\n"
            f"precision         {self.precision:.3f}\n"
            f"recall            {self.recall:.3f}\n"
            f"f1                {self.f1:.3f}\n"
        )

    def to_kv(self) -> str:
        keys = ("images", "iou_threshold", "true_positives", "false_positives", "false_negatives",
                "precision", "recall", "f1")
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in keys)


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 0.0 if s == 0 else 2 * precision * recall / s


def compute_metrics(tp: int, fp: int, fn: int, iou_threshold: float = 0.5, images: int = 0) -> MetricsReport:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return MetricsReport(tp, fp, fn, p, r, f1_score(p, r), iou_threshold, images)


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int, float], ...] = field(default=())  # (pred, gt, iou)


def greedy_match(ious: np.ndarray, confidences: Sequence[float], iou_threshold: float = 0.5,
                 allowed: np.ndarray | None = None) -> MatchResult:
    """Match predictions (rows) to ground truths (columns) in descending confidence.

    Each prediction takes the unmatched ground truth of highest IoU at or above
    the threshold; ``allowed`` masks out pairs such as class mismatches.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    ious = np.asarray(ious, dtype=np.float64)
    if ious.ndim != 2:
        ious = ious.reshape(len(confidences), -1 if ious.size else 0)
    n_pred, n_gt = ious.shape
    if allowed is not None:
        ious = np.where(allowed, ious, -1.0)
    taken = np.zeros(n_gt, bool)
    pairs = []
    for i in np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable"):
        if n_gt == 0:
            break
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            taken[j] = True
            pairs.append((int(i), j, float(row[j])))
    tp = len(pairs)
    return MatchResult(tp, n_pred - tp, n_gt - tp, tuple(pairs))


def box_iou(a: AxisBox | Quad, b: AxisBox | Quad) -> float:
    if isinstance(a, AxisBox) and isinstance(b, AxisBox):
        return iou_axis(a, b)
    ha, hb = convex_hull(np.array(a.corners())), convex_hull(np.array(b.corners()))
    if len(ha) < 3 or len(hb) < 3:
        return 0.0
    return polygon_iou([tuple(p) for p in ha], [tuple(p) for p in hb])


def match_detections(preds: Sequence[Prediction], gts: LabelSet, iou_threshold: float = 0.5) -> MatchResult:
    gt = list(gts)
    ious = np.array([[box_iou(p.box, g.box) for g in gt] for p in preds]).reshape(len(preds), len(gt))
    same = np.array([[p.class_id == g.class_id for g in gt] for p in preds], bool).reshape(ious.shape)
    return greedy_match(ious, [p.confidence for p in preds], iou_threshold, same)


def evaluate_dataset(pred_dir: str | Path, gt_dir: str | Path, kind: LabelKind = "axis",
                     iou_threshold: float = 0.5) -> MetricsReport:
    """Counts summed over every image named in either directory."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_files = {p.stem: p for p in gt_dir.glob("*.txt")}
    pred_files = {p.stem: p for p in pred_dir.glob("*.txt")} if pred_dir.is_dir() else {}
    tp = fp = fn = 0
    stems = sorted(set(gt_files) | set(pred_files))
    for stem in stems:
        if stem in gt_files:
            gts = read_labels(gt_files[stem], kind=kind)
        else:
            log.warning("no ground truth for %s; scoring its predictions as false positives", stem)
            gts = LabelSet()
        if stem in pred_files:
            preds = read_predictions(pred_files[stem], kind)
        else:
            log.warning("no predictions for %s; treating as empty", stem)
            preds = []
        m = match_detections(preds, gts, iou_threshold)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return compute_metrics(tp, fp, fn, iou_threshold, len(stems))


def write_report(report: MetricsReport, out_dir: str | Path, name: str = "metrics") -> None:
    out_dir = Path(out_dir)
    write_text(out_dir / f"{name}.txt", report.to_text())
    write_text(out_dir / f"{name}.kv", report.to_kv())
