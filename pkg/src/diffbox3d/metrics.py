"""Detection metrics: average precision, mAP, recall, pseudo-label quality.

AP uses all-point precision-recall interpolation (area under the PR curve
with the running-max precision envelope). Matching is greedy in descending
score order with deterministic tie-breaks (detection index), and each ground
truth is matched at most once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box3, iou_aabb


@dataclass
class Detection:
    """One detection for evaluation."""

    box: Box3
    class_id: int
    score: float
    scene_id: str = ""


def _match_flags(
    dets: list[Detection], gts_by_scene: dict[str, list[Box3]], iou_thresh: float
) -> tuple[np.ndarray, int]:
    """True-positive flags for score-sorted detections plus total gt count.

    Greedy: each detection claims the unmatched gt with the highest IoU, if
    that IoU reaches the threshold; duplicates of a matched gt become false
    positives.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched: dict[str, set[int]] = {sid: set() for sid in gts_by_scene}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        det = dets[i]
        gts = gts_by_scene.get(det.scene_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in matched[det.scene_id]:
                continue
            iou = iou_aabb(det.box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[det.scene_id].add(best_j)
            tp[rank] = True
    n_gt = sum(len(g) for g in gts_by_scene.values())
    return tp, n_gt


def average_precision(
    dets: list[Detection],
    gts_by_scene: dict[str, list[Box3]],
    class_id: int,
    iou_thresh: float,
) -> float | None:
    """All-point-interpolated AP for one class; None if the class has no gts."""
    cls_gts = {
        sid: [b for b in boxes if b.class_id == class_id]
        for sid, boxes in gts_by_scene.items()
    }
    n_gt = sum(len(g) for g in cls_gts.values())
    if n_gt == 0:
        return None
    cls_dets = [d for d in dets if d.class_id == class_id]
    if not cls_dets:
        return 0.0
    tp, _ = _match_flags(cls_dets, cls_gts, iou_thresh)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / n_gt
    # precision envelope (running max from the right), integrate over recall
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(env, recall):
        ap += p * (r - prev_r)
        prev_r = r
    return float(ap)


def map_at(
    dets: list[Detection], gts_by_scene: dict[str, list[Box3]], iou_thresh: float
) -> tuple[float, dict[int, float]]:
    """Unweighted mean AP over classes with at least one ground truth."""
    class_ids = sorted({b.class_id for boxes in gts_by_scene.values() for b in boxes})
    per_class = {}
    for cid in class_ids:
        ap = average_precision(dets, gts_by_scene, cid, iou_thresh)
        if ap is not None:
            per_class[cid] = ap
    if not per_class:
        return 0.0, {}
    return float(np.mean(list(per_class.values()))), per_class


def recall_at(
    dets: list[Detection], gts_by_scene: dict[str, list[Box3]], iou_thresh: float
) -> float:
    """Fraction of gts matched by some detection (greedy, score-ordered)."""
    n_gt = sum(len(g) for g in gts_by_scene.values())
    if n_gt == 0:
        return 0.0
    matched = 0
    for cid in sorted({b.class_id for boxes in gts_by_scene.values() for b in boxes}):
        cls_gts = {
            sid: [b for b in boxes if b.class_id == cid]
            for sid, boxes in gts_by_scene.items()
        }
        cls_dets = [d for d in dets if d.class_id == cid]
        tp, _ = _match_flags(cls_dets, cls_gts, iou_thresh)
        matched += int(tp.sum())
    return matched / n_gt


def pseudo_label_quality(
    pls: list[Detection], gts_by_scene: dict[str, list[Box3]], iou_thresh: float
) -> dict[str, float]:
    """mAP and recall of pseudo-labels against the true annotations."""
    m, _ = map_at(pls, gts_by_scene, iou_thresh)
    return {"map": m, "recall": recall_at(pls, gts_by_scene, iou_thresh)}
