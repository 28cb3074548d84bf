"""Multi-task detection loss and the momentum SGD update."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nnkit import ParameterStore

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossReport:
    total: float
    cls_term: float
    loc_term: float
    n_matched: int
    lam: float = 1.0

    def __post_init__(self):
        for v in (self.total, self.cls_term, self.loc_term):
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite loss component in {self}")

    def csv_row(self, iteration: int) -> str:
        return f"{iteration},{self.total:.10g},{self.cls_term:.10g},{self.loc_term:.10g},{self.n_matched}"


def cross_entropy(probs: np.ndarray, truth: np.ndarray | int) -> np.ndarray | float:
    """``-log p[truth]`` with the probability floored at ``1e-12``.

    ``probs`` is ``(..., C)``; ``truth`` holds class indices of shape ``(...)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    truth_arr = np.asarray(truth)
    n_cls = probs.shape[-1]
    if np.any(truth_arr < 0) or np.any(truth_arr >= n_cls):
        raise IndexError(f"class index outside [0, {n_cls})")
    p = np.take_along_axis(probs, truth_arr[..., None].astype(np.int64), axis=-1)[..., 0]
    out = -np.log(np.maximum(p, PROB_FLOOR))
    return float(out) if np.ndim(out) == 0 else out


def cross_entropy_grad(probs: np.ndarray, truth: np.ndarray | int) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    truth_arr = np.asarray(truth).astype(np.int64)
    grad = np.zeros_like(probs)
    p = np.take_along_axis(probs, truth_arr[..., None], axis=-1)
    g = np.where(p > PROB_FLOOR, -1.0 / np.maximum(p, PROB_FLOOR), 0.0)
    np.put_along_axis(grad, truth_arr[..., None], g, axis=-1)
    return grad


def smooth_l1(b: np.ndarray, g: np.ndarray) -> np.ndarray | float:
    """Smooth-L1 distance summed over the last axis (4 box offsets)."""
    d = np.asarray(b, dtype=np.float64) - np.asarray(g, dtype=np.float64)
    ad = np.abs(d)
    out = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(b: np.ndarray, g: np.ndarray) -> np.ndarray:
    d = np.asarray(b, dtype=np.float64) - np.asarray(g, dtype=np.float64)
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


@dataclass
class LossGrads:
    probs: np.ndarray
    boxes: np.ndarray


def multitask_loss(probs: np.ndarray, classes: np.ndarray, boxes: np.ndarray, targets: np.ndarray,
                   lam: float = 1.0, with_grad: bool = False):
    """``(sum CE + lam * sum smooth-L1 over positives) / max(1, #positives)``.

    ``probs`` is ``(S, C)`` for the ``S`` sampled items, ``classes`` their
    labels (class 0 is background), ``boxes``/``targets`` ``(S, 4)`` offsets;
    only rows with a non-background class enter the localisation term.
    Returns a :class:`LossReport`, plus a :class:`LossGrads` if ``with_grad``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    classes = np.asarray(classes).astype(np.int64)
    if len(classes) == 0:
        raise ValueError("multitask_loss needs at least one sample")
    pos = classes > 0
    n = int(pos.sum())
    norm = max(1, n)
    cls_term = float(np.sum(cross_entropy(probs, classes)))
    loc_term = float(np.sum(smooth_l1(boxes[pos], targets[pos]))) if n else 0.0
    report = LossReport(total=(cls_term + lam * loc_term) / norm, cls_term=cls_term,
                        loc_term=loc_term, n_matched=n, lam=lam)
    if not with_grad:
        return report
    g_probs = cross_entropy_grad(probs, classes) / norm
    g_boxes = np.zeros_like(np.asarray(boxes, dtype=np.float64))
    if n:
        g_boxes[pos] = lam * smooth_l1_grad(boxes[pos], targets[pos]) / norm
    return report, LossGrads(probs=g_probs, boxes=g_boxes)


class SGD:
    """Momentum SGD: ``v <- m v - lr g``, ``theta <- theta + v``; zeroes gradients."""

    def __init__(self, params: ParameterStore, lr: float = 1e-2, momentum: float = 0.9,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(params.value(name)) for name in params}

    def step(self) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        sq = 0.0
        for name in self.params:
            g = self.params.grad(name)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
            sq += float(np.sum(g * g))
        norm = math.sqrt(sq)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name in self.params:
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * scale * self.params.grad(name)
            self.params.value(name)[...] += v
        self.params.zero_grad()
        return norm


def sgd_step(params: ParameterStore, lr: float, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Functional single update; returns the (possibly new) velocity buffers."""
    opt = SGD(params, lr=lr, momentum=momentum)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity
