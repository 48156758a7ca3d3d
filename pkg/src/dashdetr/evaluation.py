"""COCO-style detection metrics: precision/recall, AP, mAP, mAP50, mAR@k.

Conventions:

* detections are ranked by descending score; equal scores are ordered by
  class id and box coordinates, so the input order never matters;
* a detection matches the unmatched same-class ground truth with the
  highest IoU >= threshold (lowest ground-truth index on IoU ties);
* AP uses 101-point interpolation of the precision envelope by default
  (``interpolation="all"`` integrates the envelope over every recall step);
* classes without ground truth are excluded from every class mean;
* all means are taken with ``math.fsum`` so they do not depend on order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import cxcywh_to_xyxy, iou
from .data import CLASS_NAMES, GroundTruthObject

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0  # exact k/100, unlike linspace
AP_MAX_DETS = 100


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: np.ndarray  # normalised cxcywh
    class_id: int
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise EvaluationError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class MatchResult:
    order: list[int]  # detection indices, best score first
    tp: list[bool]  # aligned with ``order``
    num_gt: int

    @property
    def tp_count(self) -> int:
        return sum(self.tp)

    @property
    def fp_count(self) -> int:
        return len(self.tp) - self.tp_count

    @property
    def fn_count(self) -> int:
        return self.num_gt - self.tp_count


def _rank_key(d: Detection):
    return (-d.score, d.class_id, *(float(v) for v in d.box))


def rank(detections: Sequence[Detection]) -> list[int]:
    return sorted(range(len(detections)), key=lambda i: _rank_key(detections[i]))


def match_detections(detections: Sequence[Detection], ground_truth: Sequence[GroundTruthObject],
                     iou_threshold: float) -> MatchResult:
    """Greedy per-class matching for one image."""
    order = rank(detections)
    gt_xyxy = [cxcywh_to_xyxy(g.box) for g in ground_truth]
    taken = [False] * len(ground_truth)
    tp = []
    for i in order:
        d = detections[i]
        dbox = cxcywh_to_xyxy(d.box)
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(ground_truth):
            if taken[j] or g.class_id != d.class_id:
                continue
            v = iou(dbox, gt_xyxy[j])
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        tp.append(best >= 0)
    return MatchResult(order, tp, len(ground_truth))


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    """Precision ``tp/(tp+fp)`` and recall ``tp/(tp+fn)``; 0/0 gives precision 1, recall 0."""
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def ap_from_ranked(tp_flags: Sequence[bool], num_gt: int, interpolation: str = "101") -> float:
    """AP of a ranked TP/FP list against ``num_gt`` positives (NaN if none)."""
    if num_gt == 0:
        return math.nan
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    fp = np.arange(1, len(tp_flags) + 1) - tp
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "101":
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        vals = [float(envelope[k]) if k < len(envelope) else 0.0 for k in idx]
        return math.fsum(vals) / len(RECALL_POINTS)
    if interpolation == "all":
        prev = np.concatenate([[0.0], recall[:-1]])
        return math.fsum(float(v) for v in (recall - prev) * envelope)
    raise EvaluationError(f"unknown interpolation {interpolation!r}; use '101' or 'all'")


def _cap(dets: Sequence[Detection], k: int | None) -> list[Detection]:
    if k is None or len(dets) <= k:
        return list(dets)
    return [dets[i] for i in rank(dets)[:k]]


def _class_pool(detections: Mapping, ground_truth: Mapping, class_id: int, threshold: float,
                max_dets: int | None) -> tuple[list[tuple], int]:
    """All (rank key, image, tp) triples for one class, plus its GT count."""
    pool, num_gt = [], 0
    for image_id in sorted(ground_truth):
        gts = [g for g in ground_truth[image_id] if g.class_id == class_id]
        num_gt += len(gts)
        dets = [d for d in _cap(detections.get(image_id, ()), max_dets) if d.class_id == class_id]
        res = match_detections(dets, gts, threshold)
        for i, hit in zip(res.order, res.tp):
            pool.append((_rank_key(dets[i]), image_id, hit))
    pool.sort(key=lambda t: (t[0], t[1]))
    return pool, num_gt


def average_precision(detections: Mapping, ground_truth: Mapping, class_id: int, iou_threshold: float,
                      interpolation: str = "101", max_dets: int | None = AP_MAX_DETS) -> float:
    """AP of one class over all images; NaN when the class has no ground truth."""
    pool, num_gt = _class_pool(detections, ground_truth, class_id, iou_threshold, max_dets)
    return ap_from_ranked([hit for _, _, hit in pool], num_gt, interpolation)


def max_recall(detections: Mapping, ground_truth: Mapping, class_id: int, iou_threshold: float,
               max_dets: int | None) -> float:
    pool, num_gt = _class_pool(detections, ground_truth, class_id, iou_threshold, max_dets)
    if num_gt == 0:
        return math.nan
    return sum(hit for _, _, hit in pool) / num_gt


def _mean(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else 0.0


@dataclass
class EvalReport:
    map: float
    map50: float
    mar_10d: float
    mar_100d: float
    per_class_ap: dict[str, float] = field(default_factory=dict)
    per_class_ap50: dict[str, float] = field(default_factory=dict)
    interpolation: str = "101"

    def as_dict(self) -> dict:
        def clean(d):
            return {k: (None if math.isnan(v) else v) for k, v in d.items()}

        return {
            "mAP": self.map,
            "mAP50": self.map50,
            "mAR_10d": self.mar_10d,
            "mAR_100d": self.mar_100d,
            "per_class_AP": clean(self.per_class_ap),
            "per_class_AP50": clean(self.per_class_ap50),
            "iou_thresholds": list(IOU_THRESHOLDS),
            "interpolation": self.interpolation,
        }

    def table(self) -> str:
        lines = ["Metrics\tAccuracy",
                 f"mAP\t{self.map:.3f}",
                 f"mAP50\t{self.map50:.3f}",
                 f"mAR_10d\t{self.mar_10d:.3f}",
                 f"mAR_100d\t{self.mar_100d:.3f}",
                 "",
                 "class\tAP\tAP50"]
        for name in self.per_class_ap:
            ap, ap50 = self.per_class_ap[name], self.per_class_ap50[name]
            fmt = lambda v: "n/a" if math.isnan(v) else f"{v:.3f}"
            lines.append(f"{name}\t{fmt(ap)}\t{fmt(ap50)}")
        return "\n".join(lines)


def evaluate(detections: Mapping[int, Sequence[Detection]], ground_truth: Mapping[int, Sequence[GroundTruthObject]],
             num_classes: int = len(CLASS_NAMES), interpolation: str = "101") -> EvalReport:
    """Full report over images keyed by id; every detection id must have ground truth."""
    unknown = sorted(set(detections) - set(ground_truth))
    if unknown:
        raise EvaluationError(f"detections reference unknown image ids: {unknown[:10]}")
    names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c) for c in range(num_classes)]

    ap = np.full((len(IOU_THRESHOLDS), num_classes), np.nan)
    r10 = np.full_like(ap, np.nan)
    r100 = np.full_like(ap, np.nan)
    for ti, t in enumerate(IOU_THRESHOLDS):
        for c in range(num_classes):
            ap[ti, c] = average_precision(detections, ground_truth, c, t, interpolation)
            r10[ti, c] = max_recall(detections, ground_truth, c, t, 10)
            r100[ti, c] = max_recall(detections, ground_truth, c, t, 100)

    def grid_mean(grid: np.ndarray) -> float:
        # threshold-major mean of class means
        return _mean([_mean(list(row)) for row in grid if not np.all(np.isnan(row))])

    return EvalReport(
        map=grid_mean(ap),
        map50=_mean(list(ap[0])),
        mar_10d=grid_mean(r10),
        mar_100d=grid_mean(r100),
        per_class_ap={names[c]: _mean(list(ap[:, c])) if not np.all(np.isnan(ap[:, c])) else math.nan
                      for c in range(num_classes)},
        per_class_ap50={names[c]: float(ap[0, c]) for c in range(num_classes)},
        interpolation=interpolation,
    )
