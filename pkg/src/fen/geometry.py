"""Axis-aligned box arithmetic.

Boxes are continuous and stored in center form ``(cx, cy, w, h)``. Corner
form ``(x1, y1, x2, y2)`` only appears at file boundaries. Scalar helpers
operate on :class:`Box`; the ``*_array`` / plural variants take ``(N, 4)``
float arrays in center form and are what the pipeline uses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

#: Largest admissible |dw|, |dh| before exp() is clamped.
DELTA_CLAMP = 10.0


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"degenerate corners ({x1}, {y1}, {x2}, {y2})")
        w = x2 - x1
        h = y2 - y1
        return cls(x1 + w / 2.0, y1 + h / 2.0, w, h)

    def to_corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class DeltaVector:
    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dw, self.dh)):
            raise ValueError("non-finite delta")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def to_corners(b: Box) -> tuple[float, float, float, float]:
    return b.to_corners()


def from_corners(x1: float, y1: float, x2: float, y2: float) -> Box:
    return Box.from_corners(x1, y1, x2, y2)


def corners_array(boxes: np.ndarray) -> np.ndarray:
    """Center-form ``(N, 4)`` to corner form."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half_w = boxes[:, 2] / 2.0
    half_h = boxes[:, 3] / 2.0
    return np.stack([boxes[:, 0] - half_w, boxes[:, 1] - half_h,
                     boxes[:, 0] + half_w, boxes[:, 1] + half_h], axis=1)


def centers_array(corners: np.ndarray) -> np.ndarray:
    """Corner-form ``(N, 4)`` to center form."""
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    w = corners[:, 2] - corners[:, 0]
    h = corners[:, 3] - corners[:, 1]
    return np.stack([corners[:, 0] + w / 2.0, corners[:, 1] + h / 2.0, w, h], axis=1)


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(b, b) == 1 exactly
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return min(1.0, inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between center-form arrays ``(N, 4)`` and ``(M, 4)``."""
    ca = corners_array(a)
    cb = corners_array(b)
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = _corner_areas(ca)[:, None] + _corner_areas(cb)[None, :] - inter
    return np.minimum(inter / union, 1.0)


def _corner_areas(c: np.ndarray) -> np.ndarray:
    return (c[:, 2] - c[:, 0]) * (c[:, 3] - c[:, 1])


def _as_center_array(candidates) -> np.ndarray:
    if isinstance(candidates, np.ndarray):
        return candidates.reshape(-1, 4).astype(np.float64, copy=False)
    return np.array([c.as_array() for c in candidates], dtype=np.float64).reshape(-1, 4)


def nms(boxes, scores=None, threshold: float = 0.7, max_keep: int | None = None) -> list[int]:
    """Greedy non-maximum suppression.

    ``boxes`` is either a sequence of :class:`ScoredBox` (``scores`` omitted)
    or a center-form array with a parallel ``scores`` array. A box is dropped
    iff its IoU with an already kept box is strictly greater than
    ``threshold``. Returns kept indices in descending score order; equal
    scores keep input order.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if scores is None:
        seq = list(boxes)
        scores = np.array([c.score for c in seq], dtype=np.float64)
        arr = _as_center_array([c.box for c in seq])
    else:
        arr = _as_center_array(boxes)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(arr) == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    corners = corners_array(arr)
    areas = _corner_areas(corners)
    suppressed = np.zeros(len(arr), dtype=bool)
    keep = []
    for pos, idx in enumerate(order):
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest) == 0:
            break
        iw = np.minimum(corners[idx, 2], corners[rest, 2]) - np.maximum(corners[idx, 0], corners[rest, 0])
        ih = np.minimum(corners[idx, 3], corners[rest, 3]) - np.maximum(corners[idx, 1], corners[rest, 1])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        ov = inter / (areas[idx] + areas[rest] - inter)
        suppressed[rest[ov > threshold]] = True
    return keep


def box_voting(boxes: np.ndarray, scores: np.ndarray, keep: Sequence[int], threshold: float = 0.5) -> np.ndarray:
    """Refine NMS survivors by averaging their neighbourhoods.

    Each kept box is replaced by the score-weighted mean (in corner form) of
    every candidate whose IoU with it is at least ``threshold``, itself
    included. Returns the ``(len(keep), 4)`` center-form boxes.
    """
    boxes = _as_center_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    keep = list(keep)
    if not keep:
        return np.zeros((0, 4))
    weights = np.where(iou_matrix(boxes[keep], boxes) >= threshold, scores[None, :], 0.0)
    weights[np.arange(len(keep)), keep] = np.maximum(scores[keep], 1e-12)
    voted = weights @ corners_array(boxes) / weights.sum(axis=1, keepdims=True)
    return centers_array(voted)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply regression offsets to anchors.

    Returns the decoded center-form boxes and a boolean mask marking rows whose
    size offsets were clamped to ``±DELTA_CLAMP``.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    size = deltas[:, 2:]
    clamped = np.any(np.abs(size) > DELTA_CLAMP, axis=1)
    size = np.clip(size, -DELTA_CLAMP, DELTA_CLAMP)
    out = np.empty_like(anchors)
    out[:, 0] = anchors[:, 0] + anchors[:, 2] * deltas[:, 0]
    out[:, 1] = anchors[:, 1] + anchors[:, 3] * deltas[:, 1]
    out[:, 2] = anchors[:, 2] * np.exp(size[:, 0])
    out[:, 3] = anchors[:, 3] * np.exp(size[:, 1])
    return out, clamped


def encode_boxes(targets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    return np.stack([
        (targets[:, 0] - anchors[:, 0]) / anchors[:, 2],
        (targets[:, 1] - anchors[:, 1]) / anchors[:, 3],
        np.log(targets[:, 2] / anchors[:, 2]),
        np.log(targets[:, 3] / anchors[:, 3]),
    ], axis=1)


def decode_box(anchor: Box, delta: DeltaVector) -> Box:
    out, clamped = decode_boxes(anchor.as_array(), delta.as_array())
    if clamped[0]:
        logger.warning("size offsets %s clamped to +-%g", delta, DELTA_CLAMP)
    return Box(*out[0])


def encode_box(target: Box, anchor: Box) -> DeltaVector:
    return DeltaVector(*encode_boxes(target.as_array(), anchor.as_array())[0])


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clip center-form boxes to ``[0, width] x [0, height]``.

    Boxes lying entirely outside collapse to zero size; callers filter them.
    """
    c = corners_array(boxes)
    c[:, 0::2] = np.clip(c[:, 0::2], 0.0, width)
    c[:, 1::2] = np.clip(c[:, 1::2], 0.0, height)
    return centers_array(c)


def scale_boxes(boxes: np.ndarray, factor: float) -> np.ndarray:
    """Scale width and height about each box center."""
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 2:] *= factor
    return out


def boxes_from_sequence(boxes: Sequence[Box]) -> np.ndarray:
    return _as_center_array(list(boxes))
