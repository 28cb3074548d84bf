"""Foreground/background balance of refinement proposals with and without mining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix
from .nnkit import ParameterStore
from .pipeline import TAG_RPN, FENModel, ProposalSet, generate_proposals, normalize_image, positives_mining
from .synthdata import SceneSpec, generate_scene


@dataclass(frozen=True)
class ProposalCounts:
    positives: int
    negatives: int

    @property
    def fraction(self) -> float:
        total = self.positives + self.negatives
        return self.positives / total if total else 0.0

    def ratio_text(self) -> str:
        if self.positives == 0:
            return "0:1"
        return f"1:{self.negatives / self.positives:.2f}"


@dataclass(frozen=True)
class PMStats:
    plain: ProposalCounts
    mined: ProposalCounts
    n_scenes: int

    def rows(self) -> list[str]:
        return [f"{name},{c.positives},{c.negatives},{c.ratio_text()},{c.fraction:.4f}"
                for name, c in (("off", self.plain), ("on", self.mined))]


def count_positives(proposals: ProposalSet, gts: np.ndarray, iou_threshold: float = 0.5) -> ProposalCounts:
    """A proposal is positive when it overlaps some ground truth at ``iou_threshold`` or more."""
    if len(proposals) == 0:
        return ProposalCounts(0, 0)
    if len(gts) == 0:
        return ProposalCounts(0, len(proposals))
    pos = int(np.sum(iou_matrix(proposals.boxes, gts).max(axis=1) >= iou_threshold))
    return ProposalCounts(pos, len(proposals) - pos)


def scene_proposals(model: FENModel, params: ParameterStore, image: np.ndarray,
                    mining: bool) -> ProposalSet:
    """The RoIs the refinement stage would train on for one image."""
    cfg = model.cfg
    size = image.shape[1:]
    taps = model.backbone.forward(params, normalize_image(image))
    cls, reg = model.rpn.forward(params, taps[-1])
    props = generate_proposals(cls, reg, model.anchor_grid(cls.shape), size, cfg.rpn_nms,
                               cfg.top_proposals, cfg.min_proposal_side, model.n_anchors)
    if mining:
        props = positives_mining(props, size, cfg.pm_refs, cfg.pm_scales)
    return props


def proposal_stats(model: FENModel, params: ParameterStore, spec: SceneSpec, n_scenes: int,
                   start: int = 0, iou_threshold: float = 0.5) -> PMStats:
    """Stream ``n_scenes`` synthetic scenes and count positive/negative RoIs.

    Both variants share one RPN pass per image; the plain set is exactly the
    ``rpn``-tagged part of the mined set.
    """
    plain = [0, 0]
    mined = [0, 0]
    for index in range(start, start + n_scenes):
        image, boxes = generate_scene(spec, index)
        gts = np.array([b.as_array() for b in boxes]).reshape(-1, 4)
        props = scene_proposals(model, params, image, mining=True)
        base = props.select(props.tags == TAG_RPN)
        for acc, subset in ((plain, base), (mined, props)):
            c = count_positives(subset, gts, iou_threshold)
            acc[0] += c.positives
            acc[1] += c.negatives
    return PMStats(ProposalCounts(*plain), ProposalCounts(*mined), n_scenes)
