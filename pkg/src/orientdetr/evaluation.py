"""Rotated-box average precision, VOC2007 11-point style."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import rotated_iou_matrix


class EmptyDatasetError(ValueError):
    pass


@dataclass
class EvalReport:
    ap: dict  # class id -> AP, only classes with ground truth
    detections: list = field(default_factory=list)  # per image (k, 7) arrays
    iou_thresh: float = 0.5

    @property
    def map(self):
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    def format(self):
        lines = [f"class {c}: AP {a:.4f}" for c, a in sorted(self.ap.items())]
        lines.append(f"mAP@{self.iou_thresh:g}: {self.map:.4f}")
        return "\n".join(lines)


def voc07_ap(recall, precision):
    """11-point interpolated AP: mean over t in {0, 0.1, ..., 1} of max precision at recall >= t."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    ap = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t
        ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
    return ap


def class_pr(detections, ground_truth, iou_thresh=0.5):
    """Precision/recall curve for one class.

    detections: list over images of (k, 6) arrays (score, cx, cy, w, h, theta);
    ground_truth: list over images of (g, 5) boxes. Detections are ranked by
    score over the whole set; each one claims its best-overlapping ground
    truth, and counts as a true positive only if that overlap reaches the
    threshold and the ground truth is still unclaimed.
    """
    npos = sum(len(g) for g in ground_truth)
    ranked = []
    for img, dets in enumerate(detections):
        for d in np.asarray(dets, dtype=np.float64).reshape(-1, 6):
            ranked.append((d[0], img, d[1:]))
    # stable descending sort by score
    order = sorted(range(len(ranked)), key=lambda i: -ranked[i][0])
    claimed = [np.zeros(len(g), dtype=bool) for g in ground_truth]
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        _, img, box = ranked[i]
        gts = np.asarray(ground_truth[img], dtype=np.float64).reshape(-1, 5)
        if len(gts) == 0:
            continue
        ious = rotated_iou_matrix(box[None], gts)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh and not claimed[img][j]:
            claimed[img][j] = True
            tp[rank] = 1.0
    fp = 1.0 - tp
    tp_cum, fp_cum = np.cumsum(tp), np.cumsum(fp)
    recall = tp_cum / max(npos, 1)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return recall, precision


def evaluate_detections(detections, targets, num_classes, iou_thresh=0.5) -> EvalReport:
    """Score per-image detections (k, 7) rows: class, score, cx, cy, w, h, theta.

    targets: list over images of (classes (g,), boxes (g, 5)).
    """
    if len(targets) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    if len(detections) != len(targets):
        raise ValueError(f"{len(detections)} detection sets for {len(targets)} images")
    ap = {}
    for c in range(num_classes):
        gts = [np.asarray(b).reshape(-1, 5)[np.asarray(cl) == c] for cl, b in targets]
        if sum(len(g) for g in gts) == 0:
            continue
        dets = [np.asarray(d).reshape(-1, 7) for d in detections]
        dets = [d[d[:, 0] == c][:, 1:] for d in dets]
        recall, precision = class_pr(dets, gts, iou_thresh)
        ap[c] = voc07_ap(recall, precision)
    return EvalReport(ap, list(detections), iou_thresh)
