"""COCO/BOP-style Average Precision for instance masks.

AP is the mean over IoU thresholds 0.50:0.05:0.95 of per-threshold AP;
each per-threshold AP is the mean over object classes of a 101-point
interpolated precision/recall area. Matching is greedy by descending
detection score with one-to-one assignment inside each (scene, object)
group.

Reductions intentionally use plain left-to-right float sums so results are
bit-reproducible against a straightforward reference implementation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = [0.50 + 0.05 * k for k in range(10)]
RECALL_POINTS = [k / 100.0 for k in range(101)]


@dataclass
class Detection:
    scene_id: str
    object_id: int
    mask: np.ndarray  # bool (H, W)
    score: float


@dataclass
class GroundTruthInstance:
    scene_id: str
    object_id: int
    mask: np.ndarray  # bool (H, W)


@dataclass
class ApReport:
    ap: float
    per_threshold: dict[float, float] = field(default_factory=dict)
    per_object: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "per_object": {str(k): v for k, v in self.per_object.items()},
        }


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; IoU(empty, empty) = 0."""
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def match_detections(
    detections: list[Detection],
    ground_truth: list[GroundTruthInstance],
    iou_threshold: float,
) -> list[bool]:
    """Greedy one-to-one matching of detections (already sorted by score)
    against ground truth of the same scene and object id.

    Returns one True (TP) / False (FP) flag per detection, in input order.
    Each detection takes the unmatched ground truth with the highest IoU,
    provided it reaches the threshold; earlier (higher-scored) detections
    claim first, ties on IoU go to the lower ground-truth index.
    """
    matched = [False] * len(ground_truth)
    flags = []
    for det in detections:
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(ground_truth):
            if matched[j] or gt.scene_id != det.scene_id or gt.object_id != det.object_id:
                continue
            iou = mask_iou(det.mask, gt.mask)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _interp_ap(tp_flags: list[bool], n_gt: int) -> float:
    """101-point interpolated PR area for one (threshold, object) stream.

    ``tp_flags`` is ordered by descending score across all scenes.
    """
    if n_gt == 0:
        return 0.0
    precisions = []
    recalls = []
    tp = 0
    for k, flag in enumerate(tp_flags):
        if flag:
            tp += 1
        precisions.append(tp / (k + 1))
        recalls.append(tp / n_gt)
    # max precision at recall >= r, swept right-to-left
    for k in range(len(precisions) - 2, -1, -1):
        precisions[k] = max(precisions[k], precisions[k + 1])
    total = 0.0
    j = 0
    for r in RECALL_POINTS:
        while j < len(recalls) and recalls[j] < r:
            j += 1
        total += precisions[j] if j < len(recalls) else 0.0
    return total / len(RECALL_POINTS)


def average_precision(
    detections: list[Detection],
    ground_truth: list[GroundTruthInstance],
) -> ApReport:
    """Full AP over the 10 IoU thresholds, averaged over object classes.

    Score ties are broken by detection insertion order (stable sort).
    """
    if not ground_truth:
        warnings.warn("empty ground truth; AP reported as 0", stacklevel=2)
        return ApReport(ap=0.0, per_threshold={t: 0.0 for t in IOU_THRESHOLDS})

    object_ids = sorted({g.object_id for g in ground_truth})
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)

    per_threshold: dict[float, float] = {}
    per_object_acc: dict[int, list[float]] = {o: [] for o in object_ids}
    for t in IOU_THRESHOLDS:
        obj_aps = []
        for obj in object_ids:
            gts = [g for g in ground_truth if g.object_id == obj]
            flags = _object_flags(detections, order, gts, obj, t)
            ap_t_o = _interp_ap(flags, len(gts))
            obj_aps.append(ap_t_o)
            per_object_acc[obj].append(ap_t_o)
        per_threshold[t] = sum(obj_aps) / len(obj_aps)

    ap = sum(per_threshold[t] for t in IOU_THRESHOLDS) / len(IOU_THRESHOLDS)
    per_object = {o: sum(v) / len(v) for o, v in per_object_acc.items()}
    return ApReport(ap=ap, per_threshold=per_threshold, per_object=per_object)


def _object_flags(detections, order, gts, obj, t) -> list[bool]:
    """TP/FP flags for one object at one threshold, in global score order."""
    per_scene_matched: dict[str, list[bool]] = {}
    scene_gts: dict[str, list[GroundTruthInstance]] = {}
    for g in gts:
        scene_gts.setdefault(g.scene_id, []).append(g)
    flags = []
    for i in order:
        det = detections[i]
        if det.object_id != obj:
            continue
        cand = scene_gts.get(det.scene_id, [])
        matched = per_scene_matched.setdefault(det.scene_id, [False] * len(cand))
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(cand):
            if matched[j]:
                continue
            iou = mask_iou(det.mask, g.mask)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= t:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags
