"""Segmentation scores: IoU and bounding-box detection rate."""
from dataclasses import dataclass

import numpy as np

DR_NORMALIZATIONS = ("gt_box", "box_iou")


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel bounds."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("empty bounding box")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def intersection_area(self, other) -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min) + 1
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min) + 1
        return max(w, 0) * max(h, 0)

    def contains(self, x, y):
        return (self.x_min <= x) & (x <= self.x_max) & (self.y_min <= y) & (y <= self.y_max)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks score 1."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def bounding_box(mask):
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if xs.size == 0:
        return None
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def detection_rate(pred, gt, normalization="gt_box") -> int:
    """1 if the predicted box covers the ground-truth box well enough and the
    overlap area exceeds the predicted pixels falling outside the GT box.

    ``normalization`` picks how the box overlap is compared with 0.5:
    ``"gt_box"`` divides by the GT box area, ``"box_iou"`` by the box union.
    """
    if normalization not in DR_NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {DR_NORMALIZATIONS}")
    pred, gt = _pair(pred, gt)
    bg = bounding_box(gt)
    bd = bounding_box(pred)
    if bg is None:
        return int(bd is None)
    if bd is None:
        return 0
    inter = bd.intersection_area(bg)
    if normalization == "gt_box":
        overlap = inter / bg.area
    else:
        overlap = inter / (bd.area + bg.area - inter)
    ys, xs = np.nonzero(pred)
    outside = int(np.count_nonzero(~bg.contains(xs, ys)))
    return int(overlap > 0.5 and inter > outside)


def aggregate(per_sequence):
    """Mean IoU and mean detection rate over ``(iou, dr)`` pairs."""
    rows = list(per_sequence)
    if not rows:
        raise ValueError("nothing to aggregate")
    a = np.asarray(rows, dtype=np.float64)
    return float(a[:, 0].mean()), float(a[:, 1].mean())
