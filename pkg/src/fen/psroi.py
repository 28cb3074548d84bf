"""Position-sensitive RoI pooling and adaptively weighted grid fusion.

Score-map channel layout: for a ``w_bins x h_bins`` grid with ``n_out``
outputs per bin (``C + 1`` classes or 4 box offsets), the map for output ``c``
and bin ``(i, j)`` (row ``i``, column ``j``) is channel
``c * h_bins * w_bins + i * w_bins + j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import Box

NUM_CLASSES = 2  # background, text


@dataclass(frozen=True)
class PoolGrid:
    w_bins: int
    h_bins: int

    def __post_init__(self):
        if (self.w_bins, self.h_bins) not in _VALID_GRIDS:
            raise ValueError(f"unsupported pooling grid {self.w_bins}x{self.h_bins}")

    @property
    def bins(self) -> int:
        return self.w_bins * self.h_bins

    def __str__(self) -> str:
        return f"{self.w_bins}x{self.h_bins}"


_VALID_GRIDS = {(3, 3), (7, 7), (8, 3), (11, 3)}

#: Square grids first, then the two wide ones.
ADAPTIVE_GRIDS = (PoolGrid(3, 3), PoolGrid(7, 7), PoolGrid(8, 3), PoolGrid(11, 3))
STANDARD_GRID = PoolGrid(7, 7)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _bin_bounds(rois, stride, h_bins, w_bins, height, width):
    """Feature-space bin rectangles ``[y0, y1) x [x0, x1)`` per RoI and bin.

    ``valid[r]`` is false for RoIs that do not touch the feature extent.
    """
    n = rois.shape[0]
    bounds = np.zeros((n, h_bins, w_bins, 4), dtype=np.int64)
    valid = np.ones(n, dtype=np.bool_)
    for r in range(n):
        xs = int(math.floor(rois[r, 0] / stride))
        ys = int(math.floor(rois[r, 1] / stride))
        xe = int(math.ceil(rois[r, 2] / stride))
        ye = int(math.ceil(rois[r, 3] / stride))
        if xe <= xs:
            xe = xs + 1
        if ye <= ys:
            ye = ys + 1
        if xe <= 0 or ye <= 0 or xs >= width or ys >= height:
            valid[r] = False
            continue
        rw = xe - xs
        rh = ye - ys
        for i in range(h_bins):
            y0 = ys + (i * rh) // h_bins
            y1 = ys - ((-(i + 1) * rh) // h_bins)
            y0 = min(max(y0, 0), height)
            y1 = min(max(y1, 0), height)
            for j in range(w_bins):
                x0 = xs + (j * rw) // w_bins
                x1 = xs - ((-(j + 1) * rw) // w_bins)
                x0 = min(max(x0, 0), width)
                x1 = min(max(x1, 0), width)
                bounds[r, i, j, 0] = y0
                bounds[r, i, j, 1] = y1
                bounds[r, i, j, 2] = x0
                bounds[r, i, j, 3] = x1
    return bounds, valid


@numba.njit(cache=True)
def _pool_forward(maps, bounds, n_out):
    n, h_bins, w_bins, _ = bounds.shape
    bins = h_bins * w_bins
    out = np.zeros((n, n_out, h_bins, w_bins))
    for r in range(n):
        for c in range(n_out):
            for i in range(h_bins):
                for j in range(w_bins):
                    y0 = bounds[r, i, j, 0]
                    y1 = bounds[r, i, j, 1]
                    x0 = bounds[r, i, j, 2]
                    x1 = bounds[r, i, j, 3]
                    count = (y1 - y0) * (x1 - x0)
                    if count <= 0:
                        continue
                    ch = c * bins + i * w_bins + j
                    acc = 0.0
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            acc += maps[ch, y, x]
                    out[r, c, i, j] = acc / count
    return out


@numba.njit(cache=True)
def _pool_backward(grad, bounds, n_channels, height, width):
    n, n_out, h_bins, w_bins = grad.shape
    bins = h_bins * w_bins
    dmaps = np.zeros((n_channels, height, width))
    for r in range(n):
        for c in range(n_out):
            for i in range(h_bins):
                for j in range(w_bins):
                    y0 = bounds[r, i, j, 0]
                    y1 = bounds[r, i, j, 1]
                    x0 = bounds[r, i, j, 2]
                    x1 = bounds[r, i, j, 3]
                    count = (y1 - y0) * (x1 - x0)
                    if count <= 0:
                        continue
                    ch = c * bins + i * w_bins + j
                    g = grad[r, c, i, j] / count
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            dmaps[ch, y, x] += g
    return dmaps


# ---------------------------------------------------------------------------
# pooling


class PSRoIPool:
    """Batched position-sensitive pooling over one score-map stack.

    ``rois`` are corner-form image coordinates; they are mapped to the score
    maps by dividing by ``stride``.
    """

    def __init__(self, grid: PoolGrid, n_out: int, stride: float):
        self.grid = grid
        self.n_out = n_out
        self.stride = float(stride)
        self._cache = None

    def expected_channels(self) -> int:
        return self.grid.bins * self.n_out

    def forward(self, maps: np.ndarray, rois: np.ndarray) -> np.ndarray:
        maps = np.ascontiguousarray(maps, dtype=np.float64)
        if maps.ndim != 3 or maps.shape[0] != self.expected_channels():
            raise ValueError(f"grid {self.grid} x {self.n_out} outputs needs "
                             f"{self.expected_channels()} channels, got {maps.shape}")
        rois = np.ascontiguousarray(np.asarray(rois, dtype=np.float64).reshape(-1, 4))
        bounds, valid = _bin_bounds(rois, self.stride, self.grid.h_bins, self.grid.w_bins,
                                    maps.shape[1], maps.shape[2])
        if not valid.all():
            bad = int(np.flatnonzero(~valid)[0])
            raise ValueError(f"RoI {rois[bad].tolist()} lies outside the score maps")
        self._cache = (bounds, maps.shape)
        return _pool_forward(maps, bounds, self.n_out)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("PSRoIPool.backward called before forward")
        bounds, shape = self._cache
        return _pool_backward(np.ascontiguousarray(grad, dtype=np.float64), bounds, *shape)


def psroi_pool(maps: np.ndarray, roi: Box, grid: PoolGrid, stride: float = 1.0,
               n_out: int = NUM_CLASSES) -> np.ndarray:
    """Pool one RoI; returns ``(n_out, h_bins, w_bins)`` bin averages."""
    return PSRoIPool(grid, n_out, stride).forward(maps, np.array([roi.to_corners()]))[0]


def bin_bounds(roi: Box, grid: PoolGrid, stride: float, height: int, width: int) -> np.ndarray:
    """``(h_bins, w_bins, 4)`` array of ``(y0, y1, x0, x1)`` bin rectangles."""
    bounds, valid = _bin_bounds(np.array([roi.to_corners()], dtype=np.float64), float(stride),
                                grid.h_bins, grid.w_bins, height, width)
    if not valid[0]:
        raise ValueError("RoI lies outside the score maps")
    return bounds[0]


def coarse_score(pooled: np.ndarray) -> np.ndarray:
    """Average the bins of ``(..., n_out, h_bins, w_bins)`` into ``(..., n_out)``."""
    return pooled.mean(axis=(-2, -1))


def class_softmax(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    e = np.exp(r - r.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# adaptive fusion


def adaptive_fuse_scores(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weights proportional to each branch's own textness and the fused score.

    ``scores`` has the branches on its last axis. Returns ``(weights, fused)``
    with ``fused = sum(weights * scores)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    total = s.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("adaptive weights need at least one positive branch score")
    w = s / total
    return w, np.sum(w * s, axis=-1)


def adaptive_fuse_boxes(deltas: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Blend per-branch offsets ``(..., L, 4)`` with weights ``(..., L)``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if deltas.shape[-2] != weights.shape[-1]:
        raise ValueError(f"{weights.shape[-1]} weights for {deltas.shape[-2]} branches")
    return np.sum(weights[..., None] * deltas, axis=-2)


def fused_score_jacobian(weights: np.ndarray) -> np.ndarray:
    """d(fused score)/d(branch score) = 2 W_m - sum_l W_l^2."""
    return 2.0 * weights - np.sum(weights ** 2, axis=-1, keepdims=True)


class AdaptiveFusion:
    """Forward/backward of the score and offset fusion across branches."""

    def __init__(self):
        self._cache = None

    def forward(self, scores: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w, fused = adaptive_fuse_scores(scores)
        fused_box = adaptive_fuse_boxes(deltas, w)
        self._cache = (np.asarray(scores, dtype=np.float64), np.asarray(deltas, dtype=np.float64),
                       w, fused_box)
        return fused, fused_box

    @property
    def weights(self) -> np.ndarray:
        return self._cache[2]

    def backward(self, grad_score: np.ndarray, grad_box: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is None:
            raise RuntimeError("AdaptiveFusion.backward called before forward")
        s, b, w, fused_box = self._cache
        total = s.sum(axis=-1, keepdims=True)
        d_scores = grad_score[..., None] * fused_score_jacobian(w)
        # d(fused box)/dS_m = (B_m - fused box) / sum S
        d_scores += np.einsum("...lk,...k->...l", b - fused_box[..., None, :], grad_box) / total
        d_deltas = w[..., None] * grad_box[..., None, :]
        return d_scores, d_deltas
