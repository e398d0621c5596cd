"""Greedy IoU matching and all-point-interpolated mAP."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import OrientedBox, rotated_iou


@dataclass
class EvalConfig:
    thresholds: tuple = (0.25, 0.5)
    classes: list = field(default_factory=list)

    def __post_init__(self):
        if any(not 0.0 < t < 1.0 for t in self.thresholds):
            raise ValueError(f"IoU thresholds must lie in (0, 1): {self.thresholds}")


def sort_detections(dets: Sequence[OrientedBox]) -> list[OrientedBox]:
    """Descending score; equal scores keep their input order."""
    return sorted(dets, key=lambda d: -(d.score if d.score is not None else 0.0))


def match_detections(dets: Sequence[OrientedBox], gts: Sequence[OrientedBox],
                     iou_threshold: float) -> list[bool]:
    """TP flag per detection (``dets`` must already be in descending score order).

    Each detection takes the highest-IoU still-unmatched gt of its class; it is
    a TP when that IoU reaches the threshold. Equal IoUs prefer the lower gt
    index.
    """
    used = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if used[j] or g.label != d.label:
                continue
            iou = rotated_iou(d, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_threshold:
            used[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], num_gt: int) -> float:
    """Area under the PR curve with the monotone precision envelope."""
    if num_gt <= 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    if tp.size == 0:
        return 0.0
    recall = np.concatenate([[0.0], tp / num_gt, [1.0]])
    precision = np.concatenate([[0.0], tp / np.maximum(tp + fp, 1e-300), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def per_class_ap(dets, gts, iou_threshold) -> dict:
    """Class id -> AP for every class present in ``gts``."""
    out = {}
    labels = sorted({g.label for g in gts})
    for c in labels:
        cd = sort_detections([d for d in dets if d.label == c])
        cg = [g for g in gts if g.label == c]
        out[c] = average_precision(match_detections(cd, cg, iou_threshold), len(cg))
    return out


def map_at(dets, gts, iou_threshold) -> float:
    """Mean AP over classes with at least one gt (0.0 when there are none)."""
    aps = per_class_ap(dets, gts, iou_threshold)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def evaluate_scenes(scene_dets, scene_gts, iou_threshold) -> dict:
    """Pool detections across scenes; returns class id -> AP."""
    labels = sorted({g.label for gts in scene_gts for g in gts})
    out = {}
    for c in labels:
        entries, num_gt = [], 0
        for dets, gts in zip(scene_dets, scene_gts):
            cd = sort_detections([d for d in dets if d.label == c])
            cg = [g for g in gts if g.label == c]
            num_gt += len(cg)
            for d, f in zip(cd, match_detections(cd, cg, iou_threshold)):
                entries.append((d.score or 0.0, f))
        entries.sort(key=lambda e: -e[0])
        out[c] = average_precision([f for _, f in entries], num_gt)
    return out
