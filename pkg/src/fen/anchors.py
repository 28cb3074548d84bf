"""Text-shaped anchors: the 24-shape set, grid tiling and RPN labelling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, boxes_from_sequence, encode_boxes, iou_matrix

SCALES = (32, 64, 112, 192, 304, 416)
RATIOS = (1, 2, 3, 4, 6)
NUM_PRUNED = 6

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class AnchorSpec:
    scale: float
    aspect_ratio: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.aspect_ratio < 1:
            raise ValueError("aspect ratio must be >= 1")

    @property
    def width(self) -> float:
        return self.scale * math.sqrt(self.aspect_ratio)

    @property
    def height(self) -> float:
        return self.scale / math.sqrt(self.aspect_ratio)


def build_anchor_set(scales: Sequence[float] = SCALES, ratios: Sequence[float] = RATIOS,
                     num_pruned: int = NUM_PRUNED) -> list[AnchorSpec]:
    """All scale/ratio combinations minus the ``num_pruned`` widest ones."""
    specs = [AnchorSpec(s, r) for s in scales for r in ratios]
    by_width = sorted(specs, key=lambda a: a.width, reverse=True)
    pruned = set(by_width[:num_pruned])
    return sorted((a for a in specs if a not in pruned), key=lambda a: (a.scale, a.aspect_ratio))


def anchor_shapes(specs: Sequence[AnchorSpec] | None = None) -> np.ndarray:
    """``(A, 2)`` array of anchor ``(w, h)``."""
    specs = build_anchor_set() if specs is None else specs
    return np.array([(a.width, a.height) for a in specs], dtype=np.float64)


@dataclass
class AnchorGrid:
    stride: float
    height: int
    width: int
    boxes: np.ndarray  # (H * W * A, 4), center form, ordered by (row, col, anchor)

    @property
    def num_shapes(self) -> int:
        return len(self.boxes) // (self.height * self.width)

    def __len__(self) -> int:
        return len(self.boxes)


def place_anchors(grid: tuple[int, int], stride: float,
                  shapes: np.ndarray | None = None) -> AnchorGrid:
    h, w = grid
    if h <= 0 or w <= 0 or stride <= 0:
        raise ValueError(f"invalid grid {grid} / stride {stride}")
    shapes = anchor_shapes() if shapes is None else np.asarray(shapes, dtype=np.float64)
    a = len(shapes)
    cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    boxes = np.empty((h, w, a, 4))
    boxes[..., 0] = cx[..., None]
    boxes[..., 1] = cy[..., None]
    boxes[..., 2] = shapes[:, 0]
    boxes[..., 3] = shapes[:, 1]
    return AnchorGrid(stride=stride, height=h, width=w, boxes=boxes.reshape(-1, 4))


@dataclass
class AnchorLabels:
    """Per-anchor training labels (``1`` positive, ``0`` negative, ``-1`` ignore)."""

    labels: np.ndarray
    targets: np.ndarray  # (N, 4); rows are meaningful only where labels == 1
    matched: np.ndarray  # index of the best-overlapping ground truth, -1 without any

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def label_anchors(grid: AnchorGrid | np.ndarray, gts: Sequence[Box] | np.ndarray,
                  pos_thr: float = 0.7, neg_thr: float = 0.3, sample_cap: int = 256,
                  seed: int | np.random.Generator = 0) -> AnchorLabels:
    """Match anchors to ground truth and subsample a training minibatch.

    An anchor is positive if its IoU with some ground truth reaches
    ``pos_thr`` or if it is the best anchor for some ground truth (ties all
    count), negative if its best IoU is below ``neg_thr``, ignored otherwise.
    At most ``sample_cap`` labels survive, no more than half of them positive.
    """
    if not 0.0 <= neg_thr < pos_thr <= 1.0:
        raise ValueError("need 0 <= neg_thr < pos_thr <= 1")
    anchors = grid.boxes if isinstance(grid, AnchorGrid) else np.asarray(grid, dtype=np.float64)
    gt = gts if isinstance(gts, np.ndarray) else boxes_from_sequence(gts)
    gt = gt.reshape(-1, 4)
    n = len(anchors)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = np.full(n, IGNORE, dtype=np.int8)
    targets = np.zeros((n, 4))
    matched = np.full(n, -1, dtype=np.int64)

    if len(gt) == 0:
        labels[:] = NEGATIVE
    else:
        ov = iou_matrix(anchors, gt)
        best_gt = ov.argmax(axis=1)
        best = ov[np.arange(n), best_gt]
        matched[:] = best_gt
        labels[best < neg_thr] = NEGATIVE
        gt_best = ov.max(axis=0)
        is_argmax = np.any((ov == gt_best[None, :]) & (gt_best[None, :] > 0), axis=1)
        pos = (best >= pos_thr) | is_argmax
        labels[pos] = POSITIVE
        targets[pos] = encode_boxes(gt[best_gt[pos]], anchors[pos])

    pos_idx = np.flatnonzero(labels == POSITIVE)
    max_pos = sample_cap // 2
    if len(pos_idx) > max_pos:
        drop = rng.choice(pos_idx, size=len(pos_idx) - max_pos, replace=False)
        labels[drop] = IGNORE
        pos_idx = np.flatnonzero(labels == POSITIVE)
    neg_idx = np.flatnonzero(labels == NEGATIVE)
    max_neg = sample_cap - len(pos_idx)
    if len(neg_idx) > max_neg:
        drop = rng.choice(neg_idx, size=len(neg_idx) - max_neg, replace=False)
        labels[drop] = IGNORE
    return AnchorLabels(labels=labels, targets=targets, matched=matched)
