"""Boxes, points and the point-relative offset codec.

All coordinates are normalized to the unit canvas. Boxes are in corner form
``(x1, y1, x2, y2)``. Offsets are the distances ``(l, t, r, b)`` from an
annotated point to the left, top, right and bottom box sides.

A zero-area box has IoU 0 with everything, itself included.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

__all__ = [
    "Box",
    "PointAnnotation",
    "OffsetQuad",
    "PointOutsideBoxError",
    "box_area",
    "clamp_box",
    "contains",
    "iou",
    "giou",
    "iou_matrix",
    "giou_matrix",
    "decode_offsets",
    "encode_offsets",
    "xyxy_to_xywh_pixels",
    "xywh_pixels_to_xyxy",
]


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_valid(self) -> bool:
        return 0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0


class PointAnnotation(NamedTuple):
    x: float
    y: float
    category: int


class OffsetQuad(NamedTuple):
    l: float  # noqa: E741
    t: float
    r: float
    b: float


class PointOutsideBoxError(ValueError):
    """The annotated point does not lie inside the box it is paired with."""


def box_area(box) -> float:
    x1, y1, x2, y2 = box
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def clamp_box(box, lo: float = 0.0, hi: float = 1.0) -> Box:
    x1, y1, x2, y2 = (min(max(float(v), lo), hi) for v in box)
    return Box(x1, y1, x2, y2)


def contains(box, x: float, y: float) -> bool:
    """Inclusive point-in-box test."""
    x1, y1, x2, y2 = box
    return x1 <= x <= x2 and y1 <= y <= y2


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = box_area(a)
    area_b = box_area(b)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


def giou(a, b) -> float:
    """Generalized IoU: IoU minus the empty share of the enclosing box."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = box_area(a)
    area_b = box_area(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = area_a + area_b - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if enclose <= 0.0:
        return 0.0
    return float(iou(a, b) - (enclose - union) / enclose)


def _pairwise_terms(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ious = np.where(valid, inter / np.where(valid, union, 1.0), 0.0)
    return a, b, ious, union


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    return _pairwise_terms(a, b)[2]


def giou_matrix(a, b) -> np.ndarray:
    """Pairwise generalized IoU, shape (len(a), len(b))."""
    a, b, ious, union = _pairwise_terms(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = rb - lt
    enclose = wh[..., 0] * wh[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ious - (enclose - union) / np.where(enclose > 0, enclose, 1.0)
    return np.where(enclose > 0, out, 0.0)


def decode_offsets(point, offsets) -> Box:
    """Rebuild a box from a point and its side distances, clamped to the canvas.

    The left and top distances are subtracted and the right and bottom ones
    added, so for nonnegative offsets the point always ends up inside.
    """
    x, y = float(point[0]), float(point[1])
    l, t, r, b = (float(v) for v in offsets)  # noqa: E741
    return clamp_box((x - l, y - t, x + r, y + b))


def encode_offsets(point, box) -> OffsetQuad:
    """Side distances from ``point`` to ``box``; inverse of :func:`decode_offsets`.

    Raises:
        PointOutsideBoxError: if the point is not inside the box.
    """
    x, y = float(point[0]), float(point[1])
    x1, y1, x2, y2 = (float(v) for v in box)
    if not contains((x1, y1, x2, y2), x, y):
        raise PointOutsideBoxError(f"point ({x:.4f}, {y:.4f}) is outside box ({x1:.4f}, {y1:.4f}, {x2:.4f}, {y2:.4f})")
    return OffsetQuad(x - x1, y - y1, x2 - x, y2 - y)


def xyxy_to_xywh_pixels(box, width: int, height: int) -> list[float]:
    x1, y1, x2, y2 = box
    return [x1 * width, y1 * height, (x2 - x1) * width, (y2 - y1) * height]


def xywh_pixels_to_xyxy(bbox, width: int, height: int) -> Box:
    x, y, w, h = (float(v) for v in bbox)
    return Box(x / width, y / height, (x + w) / width, (y + h) / height)
