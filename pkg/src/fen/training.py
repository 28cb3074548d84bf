"""Joint RPN + refinement training, one image per step."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .anchors import AnchorLabels, label_anchors
from .geometry import corners_array, encode_boxes, iou_matrix
from .loss import SGD, LossReport, multitask_loss
from .nnkit import ParameterStore
from .pipeline import (FENModel, ProposalSet, generate_proposals, normalize_image,
                       positives_mining)
from .psroi import class_softmax

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    clip_norm: float | None = 10.0
    rpn_pos_thr: float = 0.7
    rpn_neg_thr: float = 0.3
    rpn_batch: int = 256
    roi_pos_thr: float = 0.5
    lam: float = 1.0
    # optional step schedule: after this fraction of ``iterations`` the rate is
    # multiplied by ``lr_decay``; None keeps it constant
    lr_drop_at: float | None = None
    lr_decay: float = 0.1

    def lr_at(self, iteration: int) -> float:
        if self.lr_drop_at is not None and iteration >= self.lr_drop_at * self.iterations:
            return self.lr * self.lr_decay
        return self.lr


@dataclass
class StepResult:
    total: float
    rpn: LossReport
    roi: LossReport
    proposals: ProposalSet | None = None
    grad_norm: float = 0.0


def roi_targets(rois: np.ndarray, gts: np.ndarray, pos_thr: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Label center-form RoIs against ground truth: 1 if IoU >= ``pos_thr``."""
    labels = np.zeros(len(rois), dtype=np.int64)
    targets = np.zeros((len(rois), 4))
    if len(gts) and len(rois):
        ov = iou_matrix(rois, gts)
        best = ov.argmax(axis=1)
        pos = ov[np.arange(len(rois)), best] >= pos_thr
        labels[pos] = 1
        targets[pos] = encode_boxes(gts[best[pos]], rois[pos])
    return labels, targets


def _softmax_ce_grad(probs: np.ndarray, classes: np.ndarray, norm: int) -> np.ndarray:
    g = probs.copy()
    g[np.arange(len(classes)), classes] -= 1.0
    return g / norm


RoISource = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


def pipeline_loss(model: FENModel, params: ParameterStore, image: np.ndarray,
                  anchor_labels: AnchorLabels, rois: RoISource | tuple, backward: bool = False,
                  lam: float = 1.0) -> StepResult:
    """Summed RPN and refinement losses for one image.

    ``rois`` is either a fixed ``(boxes, labels, targets)`` triple (center-form
    boxes) or a callable building that triple from the raw RPN maps; RoI
    coordinates are treated as constants. With ``backward`` the gradient is
    accumulated into ``params``.
    """
    taps = model.backbone.forward(params, normalize_image(image))
    cls, reg = model.rpn.forward(params, taps[-1])
    _, h, w = cls.shape

    logits = model.anchor_logits(cls)
    deltas = model.anchor_deltas(reg)
    sel = np.flatnonzero(anchor_labels.labels != -1)
    classes = anchor_labels.labels[sel].astype(np.int64)
    probs = class_softmax(logits[sel])
    rpn_report, rpn_grads = multitask_loss(probs, classes, deltas[sel], anchor_labels.targets[sel],
                                           lam, with_grad=True)

    roi_boxes, roi_labels, roi_tgts = rois(cls, reg) if callable(rois) else rois
    feat = model.hyper.forward(params, taps)
    score, delta = model.refine.forward(params, feat, corners_array(roi_boxes))
    roi_probs = np.stack([1.0 - score, score], axis=1)
    roi_report, roi_grads = multitask_loss(roi_probs, roi_labels, delta, roi_tgts, lam, with_grad=True)
    result = StepResult(rpn_report.total + roi_report.total, rpn_report, roi_report)
    if not backward:
        return result

    d_score = roi_grads.probs[:, 1] - roi_grads.probs[:, 0]
    tap_grads = model.hyper.backward(params, model.refine.backward(params, d_score, roi_grads.boxes))

    norm = max(1, rpn_report.n_matched)
    dlogits = np.zeros_like(logits)
    dlogits[sel] = _softmax_ce_grad(probs, classes, norm)
    ddeltas = np.zeros_like(deltas)
    ddeltas[sel] = rpn_grads.boxes
    dfeat = model.rpn.backward(params, model.anchor_grad_to_maps(dlogits, 2, h, w),
                               model.anchor_grad_to_maps(ddeltas, 4, h, w))
    tap_grads[-1] = dfeat if tap_grads[-1] is None else tap_grads[-1] + dfeat
    model.backbone.backward(params, tap_grads)
    return result


class Trainer:
    """Momentum-SGD training over a list of ``(image, gt_boxes)`` scenes.

    ``gt_boxes`` are ``(G, 4)`` center-form arrays. Scene order is a seeded
    permutation per epoch, so runs are reproducible bit for bit.
    """

    def __init__(self, model: FENModel, params: ParameterStore, cfg: TrainConfig | None = None):
        self.model = model
        self.params = params
        self.cfg = cfg or TrainConfig()
        self.opt = SGD(params, lr=self.cfg.lr, momentum=self.cfg.momentum, clip_norm=self.cfg.clip_norm)
        self.rng = np.random.default_rng(self.cfg.seed + 1)
        self.iteration = 0
        self._grids = {}

    def _grid(self, feat_hw):
        if feat_hw not in self._grids:
            self._grids[feat_hw] = self.model.anchor_grid(feat_hw)
        return self._grids[feat_hw]

    def step(self, image: np.ndarray, gts: np.ndarray) -> StepResult:
        mcfg = self.model.cfg
        size = image.shape[1:]
        kept = {}

        def rois(cls, reg):
            grid = self._grid(cls.shape[1:])
            props = generate_proposals(cls, reg, grid, size, mcfg.rpn_nms, mcfg.top_proposals,
                                       mcfg.min_proposal_side, self.model.n_anchors)
            if mcfg.enable_pm:
                props = positives_mining(props, size, mcfg.pm_refs, mcfg.pm_scales)
            kept["proposals"] = props
            labels, targets = roi_targets(props.boxes, gts, self.cfg.roi_pos_thr)
            return props.boxes, labels, targets

        feat_hw = _feature_hw(self.model, size)
        labels = label_anchors(self._grid(feat_hw), gts, self.cfg.rpn_pos_thr, self.cfg.rpn_neg_thr,
                               self.cfg.rpn_batch, seed=self.rng)
        result = pipeline_loss(self.model, self.params, image, labels, rois, backward=True, lam=self.cfg.lam)
        self.opt.lr = self.cfg.lr_at(self.iteration)
        result.grad_norm = self.opt.step()
        self.iteration += 1
        result.proposals = kept.get("proposals")
        return result

    def fit(self, scenes: Sequence[tuple[np.ndarray, np.ndarray]], iterations: int | None = None,
            log: Callable[[int, StepResult], None] | None = None) -> list[StepResult]:
        iterations = self.cfg.iterations if iterations is None else iterations
        history = []
        order = np.array([], dtype=np.int64)
        start = time.perf_counter()
        for it in range(iterations):
            if len(order) == 0:
                order = self.rng.permutation(len(scenes))
            idx, order = order[0], order[1:]
            image, gts = scenes[idx]
            res = self.step(image, gts)
            history.append(res)
            if log is not None:
                log(it, res)
            if it % 250 == 0:
                logger.info("iter %d loss %.4f (rpn %.4f roi %.4f) %.1fs", it, res.total,
                            res.rpn.total, res.roi.total, time.perf_counter() - start)
        return history


def _feature_hw(model: FENModel, size) -> tuple[int, int]:
    h, w = size
    for s in model.cfg.backbone.strides:
        h = (h - 1) // s + 1
        w = (w - 1) // s + 1
    return h, w


def loss_row(iteration: int, res: StepResult) -> str:
    """``iter,total,cls,loc,N`` with both stages summed."""
    cls = res.rpn.cls_term / max(1, res.rpn.n_matched) + res.roi.cls_term / max(1, res.roi.n_matched)
    loc = res.rpn.loc_term / max(1, res.rpn.n_matched) + res.roi.loc_term / max(1, res.roi.n_matched)
    n = res.rpn.n_matched + res.roi.n_matched
    return f"{iteration},{res.total:.10g},{cls:.10g},{loc:.10g},{n}"
