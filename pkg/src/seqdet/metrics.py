"""Detection evaluation: IoU, NMS, greedy matching, AP and mAP at IoU 0.5.

Average precision uses all-point interpolation (the precision envelope
integrated over recall).  Matching is per class, greedy by descending
confidence, one match per ground-truth box.  Conventions fixed here so the
metrics are total functions: precision is 1.0 when there are no detections,
recall is 1.0 when there are no ground truths.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

from .boxes import BoxLabel, Detection

__all__ = [
    "iou",
    "nms",
    "MatchRecord",
    "MatchResult",
    "match_detections",
    "precision_recall",
    "average_precision",
    "mean_ap",
]

log = logging.getLogger(__name__)


def iou(a, b) -> float:
    """Intersection over union of two center-format boxes (any object with
    cx/cy/w/h attributes)."""
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise ValueError("iou requires positive box extents")
    ax1, ax2 = a.cx - a.w / 2, a.cx + a.w / 2
    ay1, ay2 = a.cy - a.h / 2, a.cy + a.h / 2
    bx1, bx2 = b.cx - b.w / 2, b.cx + b.w / 2
    by1, by2 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression, independently per class.

    Detections are visited in descending confidence (ties keep input order);
    a detection is dropped when its IoU with an already kept detection of the
    same class exceeds the threshold.
    """
    kept: list[Detection] = []
    ordered = sorted(dets, key=lambda d: -d.confidence)
    for det in ordered:
        suppressed = any(
            k.class_id == det.class_id and iou(k, det) > iou_threshold for k in kept
        )
        if not suppressed:
            kept.append(det)
    return kept


@dataclass(frozen=True)
class MatchRecord:
    class_id: int
    confidence: float
    is_tp: bool
    truth_key: tuple | None  # (frame key, index within that frame) or None


@dataclass(frozen=True)
class MatchResult:
    """Per-detection TP/FP flags (sorted by descending confidence) and the
    ground-truth count per class."""

    records: tuple[MatchRecord, ...]
    gt_counts: dict[int, int]


def match_detections(dets: Iterable[tuple[Hashable, Detection]],
                     truths: Iterable[tuple[Hashable, BoxLabel]],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching of detections to ground truths within each frame key.

    A detection is a true positive iff the best-IoU unmatched truth of the
    same class in the same frame reaches the IoU threshold; that truth is
    then consumed.  Each truth is matched at most once.
    """
    det_list = list(dets)
    truth_list = list(truths)

    gt_counts: dict[int, int] = {}
    for _, t in truth_list:
        gt_counts[t.class_id] = gt_counts.get(t.class_id, 0) + 1

    # (key, class) -> list of (truth_key, box)
    by_frame: dict[tuple, list[tuple[tuple, BoxLabel]]] = {}
    for idx, (key, t) in enumerate(truth_list):
        by_frame.setdefault((key, t.class_id), []).append(((key, idx), t))

    matched: set[tuple] = set()
    ordered = sorted(enumerate(det_list), key=lambda e: -e[1][1].confidence)
    records = []
    for _, (key, det) in ordered:
        best_iou = 0.0
        best: tuple | None = None
        for truth_key, t in by_frame.get((key, det.class_id), ()):
            if truth_key in matched:
                continue
            v = iou(det, t)
            if v > best_iou:
                best_iou = v
                best = truth_key
        if best is not None and best_iou >= iou_threshold:
            matched.add(best)
            records.append(MatchRecord(det.class_id, det.confidence, True, best))
        else:
            records.append(MatchRecord(det.class_id, det.confidence, False, None))
    return MatchResult(tuple(records), gt_counts)


def precision_recall(match: MatchResult, class_id: int | None = None) -> tuple[float, float]:
    """Micro precision/recall over all records, or one class when given."""
    recs = [r for r in match.records if class_id is None or r.class_id == class_id]
    if class_id is None:
        n_truth = sum(match.gt_counts.values())
    else:
        n_truth = match.gt_counts.get(class_id, 0)
    tp = sum(r.is_tp for r in recs)
    precision = tp / len(recs) if recs else 1.0
    recall = tp / n_truth if n_truth else 1.0
    return precision, recall


def average_precision(match: MatchResult, class_id: int) -> float:
    """All-point-interpolation AP for one class.

    Cumulative precision is replaced by its running maximum from the right
    (the precision envelope) and integrated over recall.
    """
    npos = match.gt_counts.get(class_id, 0)
    if npos == 0:
        raise ValueError(f"average_precision: class {class_id} has no ground truths")
    recs = [r for r in match.records if r.class_id == class_id]
    if not recs:
        return 0.0
    tp = 0
    recalls = []
    precisions = []
    for i, r in enumerate(recs, start=1):
        tp += r.is_tp
        recalls.append(tp / npos)
        precisions.append(tp / i)
    # precision envelope, right to left
    env = precisions[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def mean_ap(aps: Mapping[int, float], class_filter: Iterable[int]) -> float:
    """Unweighted mean AP over the filtered classes that were evaluated.

    Classes in the filter without an AP (no ground truth) are excluded and
    logged; an empty filter is rejected.
    """
    wanted = sorted(set(class_filter))
    if not wanted:
        raise ValueError("mean_ap: empty class filter")
    present = [c for c in wanted if c in aps]
    absent = [c for c in wanted if c not in aps]
    if absent:
        log.info("mean_ap: %d class(es) excluded (no ground truth): %s", len(absent), absent)
    if not present:
        raise ValueError("mean_ap: no filtered class has an evaluated AP")
    return sum(aps[c] for c in present) / len(present)
