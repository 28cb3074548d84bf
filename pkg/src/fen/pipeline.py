"""The detector: toy backbone, FE-RPN, hyper feature, proposals and refinement.

Shapes follow the nnkit convention ``(C, H, W)``. The backbone reaches a
stride of 8 after three stride-2 stages; the fourth stage keeps that
resolution so the last ``n_taps`` layer outputs share one spatial size and
serve as hyper-feature taps. The deepest tap feeds the RPN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import zoom

from . import nnkit
from .anchors import anchor_shapes, place_anchors, AnchorGrid
from .geometry import (Box, box_voting, clip_boxes, corners_array, decode_boxes, nms, scale_boxes)
from .nnkit import (Bottleneck, Concat, Conv2d, MaxPool2x2, ParameterStore, ReLU,
                    ResidualBlock, ShapeError, UpsampleConv)
from .psroi import (ADAPTIVE_GRIDS, NUM_CLASSES, STANDARD_GRID, AdaptiveFusion, PSRoIPool,
                    class_softmax, softmax_backward)

logger = logging.getLogger(__name__)

TAG_RPN = "rpn"
TAG_SCALED_SMALL = "scaled_0.7"
TAG_SCALED_LARGE = "scaled_1.3"
TAG_HALF = "half_region"


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    n_taps: int = 3

    def __post_init__(self):
        if len(self.widths) != len(self.strides):
            raise ValueError("one stride per stage")
        if self.strides[-1] != 1 and self.n_taps > 1:
            raise ValueError("the last stage must keep resolution to provide several taps")

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))


@dataclass(frozen=True)
class FENConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn_branch_channels: int = 32
    rpn_channels: int = 64
    bottleneck_channels: int = 16
    hyper_channels: int = 64
    enable_fe_rpn: bool = True
    enable_hyper: bool = True
    enable_adaptive: bool = True
    enable_pm: bool = True
    enable_half_region: bool = True
    enable_multiscale: bool = False
    scales: tuple[float, ...] = (1.0,)
    rpn_nms: float = 0.7
    top_proposals: int = 200
    min_proposal_side: float = 2.0
    pm_refs: int = 50
    pm_scales: tuple[float, float] = (0.7, 1.3)
    half_refs: int = 50
    score_threshold: float = 0.5
    final_nms: float = 0.3
    # IoU for averaging NMS survivors with their neighbours; None disables
    box_voting: float | None = 0.5

    @property
    def grids(self):
        return ADAPTIVE_GRIDS if self.enable_adaptive else (STANDARD_GRID,)

    @property
    def stride(self) -> int:
        return self.backbone.stride


def baseline_config(**overrides) -> FENConfig:
    """All FEN components switched off (plain R-FCN-style path)."""
    return FENConfig(enable_fe_rpn=False, enable_hyper=False, enable_adaptive=False,
                     enable_pm=False, enable_half_region=False, enable_multiscale=False,
                     **overrides)


# ---------------------------------------------------------------------------
# network parts


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, params, x):
        for layer in self.layers:
            x = layer.forward(params, x)
        return x

    def backward(self, params, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(params, grad)
        return grad

    def init_params(self, params, rng):
        nnkit.init_layers(self.layers, params, rng)


class Backbone:
    """Plain conv/relu stages; returns the last ``n_taps`` layer outputs."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        self.blocks: list[Sequential] = []
        c_in = cfg.in_channels
        for k, (width, stride) in enumerate(zip(cfg.widths, cfg.strides)):
            depth = max(1, cfg.n_taps - 1) if k == len(cfg.widths) - 1 else 1
            for d in range(depth):
                name = f"backbone.stage{k + 1}" + (f".{d}" if depth > 1 else "")
                self.blocks.append(Sequential([Conv2d(name, c_in, width, 3, stride=stride if d == 0 else 1),
                                               ReLU(f"{name}.relu")]))
                c_in = width
        if cfg.n_taps > len(self.blocks):
            raise ValueError("more taps than backbone layers")
        self.out_channels = [b.layers[0].out_channels for b in self.blocks[-cfg.n_taps:]]

    def init_params(self, params, rng):
        for b in self.blocks:
            b.init_params(params, rng)

    def forward(self, params, image):
        outs = []
        x = image
        for b in self.blocks:
            x = b.forward(params, x)
            outs.append(x)
        return outs[-self.cfg.n_taps:]

    def backward(self, params, tap_grads):
        n_front = len(self.blocks) - self.cfg.n_taps
        grad = None
        for k in range(len(self.blocks) - 1, -1, -1):
            tap_k = k - n_front
            if tap_k >= 0 and tap_grads[tap_k] is not None:
                grad = tap_grads[tap_k] if grad is None else grad + tap_grads[tap_k]
            if grad is None:
                continue
            grad = self.blocks[k].backward(params, grad)
        return grad


class RPNHead:
    """Anchor classification/regression head.

    With ``enhanced`` set this is the FE-RPN: a 3x3 branch, a 1x3 branch and a
    pool -> 1x1 -> upsample-conv branch, concatenated, fused by a 1x1 conv and
    a residual block. Otherwise a single 3x3 sliding-window conv.
    """

    def __init__(self, in_channels: int, n_anchors: int, branch_channels: int = 32,
                 channels: int = 64, enhanced: bool = True):
        self.enhanced = enhanced
        self.n_anchors = n_anchors
        b = branch_channels
        if enhanced:
            self.branch_a = Sequential([Conv2d("rpn.conv3x3", in_channels, b, 3), ReLU("rpn.a.relu")])
            self.branch_b = Sequential([Conv2d("rpn.conv1x3", in_channels, b, (1, 3)), ReLU("rpn.b.relu")])
            self.pool = MaxPool2x2("rpn.pool", replicate_odd=True)
            self.branch_c = Sequential([Bottleneck("rpn.reduce", in_channels, b), ReLU("rpn.c.relu1"),
                                        UpsampleConv("rpn.upconv", b, b), ReLU("rpn.c.relu2")])
            self.concat = Concat("rpn.concat")
            self.fuse = Sequential([Bottleneck("rpn.fuse", 3 * b, channels), ReLU("rpn.fuse.relu"),
                                    ResidualBlock("rpn.res", channels)])
        else:
            self.trunk = Sequential([Conv2d("rpn.conv3x3", in_channels, channels, 3), ReLU("rpn.relu")])
        self.cls = Conv2d("rpn.cls", channels, 2 * n_anchors, 1)
        self.reg = Conv2d("rpn.reg", channels, 4 * n_anchors, 1)

    def init_params(self, params, rng):
        if self.enhanced:
            for part in (self.branch_a, self.branch_b, self.branch_c, self.fuse):
                part.init_params(params, rng)
        else:
            self.trunk.init_params(params, rng)
        self.cls.init_params(params, rng)
        self.reg.init_params(params, rng)

    def forward(self, params, feat):
        if self.enhanced:
            h, w = feat.shape[1:]
            a = self.branch_a.forward(params, feat)
            b = self.branch_b.forward(params, feat)
            c_full = self.branch_c.forward(params, self.pool.forward(params, feat))
            self._c_shapes = (c_full.shape, (h, w))
            c = c_full[:, :h, :w]
            x = self.fuse.forward(params, self.concat.forward(params, a, b, c))
        else:
            x = self.trunk.forward(params, feat)
        return self.cls.forward(params, x), self.reg.forward(params, x)

    def backward(self, params, dcls, dreg):
        dx = self.cls.backward(params, dcls) + self.reg.backward(params, dreg)
        if not self.enhanced:
            return self.trunk.backward(params, dx)
        da, db, dc = self.concat.backward(params, self.fuse.backward(params, dx))
        full, (h, w) = self._c_shapes
        dc_full = np.zeros(full)
        dc_full[:, :h, :w] = dc
        dfeat = self.pool.backward(params, self.branch_c.backward(params, dc_full))
        return dfeat + self.branch_a.backward(params, da) + self.branch_b.backward(params, db)


class HyperFeature:
    """Bottleneck each tap, concatenate, then one 3x3 conv.

    With ``enabled`` false only the deepest tap is used (single-scale feature).
    """

    def __init__(self, tap_channels: list[int], bottleneck: int = 16, out_channels: int = 64,
                 enabled: bool = True):
        self.enabled = enabled
        self.n_taps = len(tap_channels)
        if enabled:
            self.squeeze = [Sequential([Bottleneck(f"hyper.bottleneck{k}", c, bottleneck),
                                        ReLU(f"hyper.bottleneck{k}.relu")])
                            for k, c in enumerate(tap_channels)]
            self.concat = Concat("hyper.concat")
            in_ch = bottleneck * len(tap_channels)
        else:
            self.squeeze = []
            in_ch = tap_channels[-1]
        self.merge = Sequential([Conv2d("hyper.conv", in_ch, out_channels, 3), ReLU("hyper.relu")])
        self.out_channels = out_channels

    def init_params(self, params, rng):
        for s in self.squeeze:
            s.init_params(params, rng)
        self.merge.init_params(params, rng)

    def forward(self, params, taps):
        if not self.enabled:
            return self.merge.forward(params, taps[-1])
        if len(taps) != self.n_taps:
            raise ShapeError("hyper", f"expected {self.n_taps} taps, got {len(taps)}")
        if len({t.shape[1:] for t in taps}) != 1:
            raise ShapeError("hyper", "taps must share spatial dims")
        parts = [s.forward(params, t) for s, t in zip(self.squeeze, taps)]
        return self.merge.forward(params, self.concat.forward(params, *parts))

    def backward(self, params, grad):
        d = self.merge.backward(params, grad)
        if not self.enabled:
            return [None] * (self.n_taps - 1) + [d]
        return [s.backward(params, g) for s, g in zip(self.squeeze, self.concat.backward(params, d))]


class RefinementHead:
    """Score maps per pooling grid, PS-RoI pooling, softmax and adaptive fusion."""

    def __init__(self, in_channels: int, grids, stride: float, adaptive: bool = True):
        self.grids = tuple(grids)
        self.adaptive = adaptive and len(self.grids) > 1
        self.cls_maps = [Conv2d(f"refine.cls{g}", in_channels, NUM_CLASSES * g.bins, 1) for g in self.grids]
        self.reg_maps = [Conv2d(f"refine.reg{g}", in_channels, 4 * g.bins, 1) for g in self.grids]
        self.cls_pool = [PSRoIPool(g, NUM_CLASSES, stride) for g in self.grids]
        self.reg_pool = [PSRoIPool(g, 4, stride) for g in self.grids]
        self.fusion = AdaptiveFusion()

    def init_params(self, params, rng):
        nnkit.init_layers(self.cls_maps + self.reg_maps, params, rng)

    def forward(self, params, feat, rois):
        """``rois`` are corner-form image boxes. Returns fused text score and offsets."""
        scores, deltas, probs = [], [], []
        for cm, rm, cp, rp in zip(self.cls_maps, self.reg_maps, self.cls_pool, self.reg_pool):
            r = cp.forward(cm.forward(params, feat), rois).mean(axis=(2, 3))
            p = class_softmax(r)
            probs.append(p)
            scores.append(p[:, 1])
            deltas.append(rp.forward(rm.forward(params, feat), rois).mean(axis=(2, 3)))
        self._probs = probs
        s = np.stack(scores, axis=1)
        b = np.stack(deltas, axis=1)
        self._feat_shape = feat.shape
        if self.adaptive:
            return self.fusion.forward(s, b)
        return s[:, 0], b[:, 0]

    def branch_weights(self) -> np.ndarray | None:
        return self.fusion.weights if self.adaptive else None

    def backward(self, params, d_score, d_box):
        if self.adaptive:
            ds, db = self.fusion.backward(d_score, d_box)
        else:
            ds, db = d_score[:, None], d_box[:, None, :]
        dfeat = np.zeros(self._feat_shape)
        for k, (g, cm, rm, cp, rp) in enumerate(zip(self.grids, self.cls_maps, self.reg_maps,
                                                     self.cls_pool, self.reg_pool)):
            p = self._probs[k]
            dp = np.zeros_like(p)
            dp[:, 1] = ds[:, k]
            dr = softmax_backward(p, dp)
            dpool = np.broadcast_to(dr[:, :, None, None] / g.bins,
                                    (len(dr), NUM_CLASSES, g.h_bins, g.w_bins))
            dfeat += cm.backward(params, cp.backward(dpool))
            dpool = np.broadcast_to(db[:, k, :, None, None] / g.bins, (len(dr), 4, g.h_bins, g.w_bins))
            dfeat += rm.backward(params, rp.backward(dpool))
        return dfeat


class FENModel:
    """Wires the parts together for one :class:`FENConfig`."""

    def __init__(self, cfg: FENConfig | None = None):
        self.cfg = cfg or FENConfig()
        self.shapes = anchor_shapes()
        self.backbone = Backbone(self.cfg.backbone)
        self.rpn = RPNHead(self.backbone.out_channels[-1], len(self.shapes),
                           self.cfg.rpn_branch_channels, self.cfg.rpn_channels,
                           enhanced=self.cfg.enable_fe_rpn)
        self.hyper = HyperFeature(self.backbone.out_channels, self.cfg.bottleneck_channels,
                                  self.cfg.hyper_channels, enabled=self.cfg.enable_hyper)
        self.refine = RefinementHead(self.hyper.out_channels, self.cfg.grids, self.cfg.stride,
                                     adaptive=self.cfg.enable_adaptive)

    @property
    def n_anchors(self) -> int:
        return len(self.shapes)

    def init_params(self, seed: int = 0) -> ParameterStore:
        rng = np.random.default_rng(seed)
        params = ParameterStore()
        for part in (self.backbone, self.rpn, self.hyper, self.refine):
            part.init_params(params, rng)
        return params

    def check_params(self, params: ParameterStore | None) -> None:
        if params is None or len(params) == 0:
            raise ValueError("model parameters are not loaded")
        expected = self.init_params(0)
        missing = [n for n in expected if n not in params]
        if missing:
            raise ValueError(f"checkpoint lacks parameters {missing[:3]} (toggle mismatch?)")
        for n in expected:
            if params.value(n).shape != expected.value(n).shape:
                raise ValueError(f"parameter {n} has shape {params.value(n).shape}, "
                                 f"expected {expected.value(n).shape}")

    def anchor_grid(self, feat_shape) -> AnchorGrid:
        return place_anchors(feat_shape[-2:], self.cfg.stride, self.shapes)

    # per-anchor views of the RPN outputs
    def anchor_logits(self, cls: np.ndarray) -> np.ndarray:
        _, h, w = cls.shape
        return cls.reshape(self.n_anchors, 2, h, w).transpose(2, 3, 0, 1).reshape(-1, 2)

    def anchor_deltas(self, reg: np.ndarray) -> np.ndarray:
        _, h, w = reg.shape
        return reg.reshape(self.n_anchors, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)

    def anchor_grad_to_maps(self, g: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
        return g.reshape(h, w, self.n_anchors, k).transpose(2, 3, 0, 1).reshape(self.n_anchors * k, h, w)


# ---------------------------------------------------------------------------
# proposals


@dataclass
class ProposalSet:
    boxes: np.ndarray  # (N, 4) center form
    scores: np.ndarray
    tags: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def corners(self) -> np.ndarray:
        return corners_array(self.boxes)

    def concat(self, other: "ProposalSet") -> "ProposalSet":
        return ProposalSet(np.concatenate([self.boxes, other.boxes]),
                           np.concatenate([self.scores, other.scores]),
                           np.concatenate([self.tags, other.tags]))

    def select(self, mask) -> "ProposalSet":
        return ProposalSet(self.boxes[mask], self.scores[mask], self.tags[mask])

    @classmethod
    def empty(cls) -> "ProposalSet":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype="<U12"))


def _rpn_scores(logits: np.ndarray) -> np.ndarray:
    return class_softmax(logits)[:, 1]


def generate_proposals(cls: np.ndarray, reg: np.ndarray, grid: AnchorGrid | np.ndarray,
                       image_size: tuple[int, int], nms_threshold: float = 0.7,
                       top_n: int = 200, min_side: float = 2.0, n_anchors: int | None = None) -> ProposalSet:
    """Decode every anchor, clip, drop tiny boxes, NMS and keep the best ``top_n``.

    ``cls``/``reg`` are the raw ``(2A, H, W)`` / ``(4A, H, W)`` RPN maps;
    ``image_size`` is ``(height, width)``.
    """
    anchors = grid.boxes if isinstance(grid, AnchorGrid) else np.asarray(grid)
    _, h, w = cls.shape
    a = n_anchors or cls.shape[0] // 2
    logits = cls.reshape(a, 2, h, w).transpose(2, 3, 0, 1).reshape(-1, 2)
    deltas = reg.reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    scores = _rpn_scores(logits)
    boxes, _ = decode_boxes(anchors, deltas)
    boxes = clip_boxes(boxes, image_size[1], image_size[0])
    ok = (boxes[:, 2] >= min_side) & (boxes[:, 3] >= min_side)
    boxes, scores = boxes[ok], scores[ok]
    keep = nms(boxes, scores, nms_threshold, max_keep=top_n)
    return ProposalSet(boxes[keep], scores[keep], np.full(len(keep), TAG_RPN, dtype="<U12"))


def positives_mining(proposals: ProposalSet, image_size: tuple[int, int], n_refs: int = 50,
                     scales: tuple[float, ...] = (0.7, 1.3)) -> ProposalSet:
    """Append copies of the best ``n_refs`` proposals rescaled about their centers."""
    refs = proposals.select(slice(0, min(n_refs, len(proposals))))
    out = proposals
    for s in scales:
        boxes = clip_boxes(scale_boxes(refs.boxes, s), image_size[1], image_size[0])
        out = out.concat(ProposalSet(boxes, refs.scores.copy(),
                                     np.full(len(refs), f"scaled_{s:g}", dtype="<U12")))
    return out


def half_region_augment(proposals: ProposalSet, n_refs: int = 50) -> ProposalSet:
    """Append the left and right halves of the best ``n_refs`` proposals."""
    refs = proposals.select(slice(0, min(n_refs, len(proposals))))
    halves = []
    for sign in (-1.0, 1.0):
        b = refs.boxes.copy()
        b[:, 0] += sign * b[:, 2] / 4.0
        b[:, 2] /= 2.0
        halves.append(b)
    # interleave so that each reference contributes (left, right)
    boxes = np.stack(halves, axis=1).reshape(-1, 4)
    scores = np.repeat(refs.scores, 2)
    return proposals.concat(ProposalSet(boxes, scores, np.full(len(boxes), TAG_HALF, dtype="<U12")))


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


@dataclass
class DetectionBatch:
    boxes: np.ndarray  # (N, 4) center form
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)

    def to_list(self) -> list[Detection]:
        return [Detection(Box(*b), float(s)) for b, s in zip(self.boxes, self.scores)]


def normalize_image(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) - 0.5


def resize_image(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image
    return np.stack([zoom(ch, factor, order=1, mode="nearest", grid_mode=True) for ch in image])


def _candidates(model: FENModel, params: ParameterStore, image: np.ndarray,
                cfg: FENConfig) -> tuple[np.ndarray, np.ndarray]:
    """Refined boxes scoring at least ``score_threshold``, before the final NMS."""
    size = image.shape[1:]
    taps = model.backbone.forward(params, normalize_image(image))
    cls, reg = model.rpn.forward(params, taps[-1])
    props = generate_proposals(cls, reg, model.anchor_grid(cls.shape), size, cfg.rpn_nms,
                               cfg.top_proposals, cfg.min_proposal_side, model.n_anchors)
    if cfg.enable_half_region:
        props = half_region_augment(props, cfg.half_refs)
    if len(props) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    feat = model.hyper.forward(params, taps)
    score, delta = model.refine.forward(params, feat, props.corners)
    boxes, _ = decode_boxes(props.boxes, delta)
    boxes = clip_boxes(boxes, size[1], size[0])
    ok = (score >= cfg.score_threshold) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
    return boxes[ok], score[ok]


def detect_image(image: np.ndarray, params: ParameterStore, cfg: FENConfig | None = None,
                 model: FENModel | None = None) -> DetectionBatch:
    """Run the full detector on a ``(C, H, W)`` image in ``[0, 1]``.

    In multi-scale mode the image is processed at every configured scale and
    the candidates are mapped back to the original frame. The pooled
    candidates then go through one final NMS, and the survivors are
    optionally refined by box voting.
    """
    cfg = cfg or (model.cfg if model is not None else FENConfig())
    model = model or FENModel(cfg)
    model.check_params(params)
    scales = cfg.scales if cfg.enable_multiscale else (1.0,)
    boxes, scores = [], []
    for s in scales:
        b, sc = _candidates(model, params, resize_image(image, s), cfg)
        if s != 1.0:
            b = clip_boxes(b / s, image.shape[2], image.shape[1])
        boxes.append(b)
        scores.append(sc)
    boxes, scores = np.concatenate(boxes), np.concatenate(scores)
    keep = nms(boxes, scores, cfg.final_nms)
    if cfg.box_voting is not None:
        return DetectionBatch(box_voting(boxes, scores, keep, cfg.box_voting), scores[keep])
    return DetectionBatch(boxes[keep], scores[keep])


def with_toggles(cfg: FENConfig, **toggles) -> FENConfig:
    return replace(cfg, **toggles)
