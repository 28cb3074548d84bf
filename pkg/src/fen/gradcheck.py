"""Finite-difference verification of every backward pass in the network.

Each check wraps a forward/backward pair into a scalar objective by
projecting the outputs onto fixed random weights. Layer inputs are stored
next to the parameters under ``input*`` names, so one central-difference
probe covers parameter and input gradients alike. Checks run on small
shapes so that the whole suite stays fast on one core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .anchors import label_anchors
from .geometry import centers_array
from .loss import multitask_loss
from .nnkit import (LAYER_KINDS, Bottleneck, Concat, Conv2d, MaxPool2x2, ParameterStore, ReLU,
                    ResidualBlock, UpsampleConv, grad_check)
from .pipeline import BackboneConfig, FENConfig, FENModel, HyperFeature, RefinementHead, RPNHead
from .psroi import ADAPTIVE_GRIDS, AdaptiveFusion, PSRoIPool
from .synthdata import SceneSpec, generate_scene
from .training import pipeline_loss, roi_targets

TOLERANCE = 1e-5

Objective = Callable[[ParameterStore, bool], float]


@dataclass
class CheckResult:
    name: str
    group: str  # "layer" or "composite"
    max_rel_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.group:<9} {self.name:<22} {self.max_rel_error:10.3e} {self.seconds:7.2f}s  {status}"


def _randomize(params: ParameterStore, rng: np.random.Generator, scale: float = 0.5) -> None:
    # zero-initialised tensors (residual second conv, biases) would hide errors
    for n in params:
        params.set_value(n, rng.uniform(-scale, scale, params.value(n).shape))


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.05) -> np.ndarray:
    x = rng.uniform(low, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _layer_objective(layer, params: ParameterStore, n_inputs: int, rng: np.random.Generator) -> Objective:
    proj = {}

    def fn(p: ParameterStore, backward: bool) -> float:
        xs = [p.value(f"input{k}") for k in range(n_inputs)]
        out = layer.forward(p, *xs)
        if "r" not in proj:
            proj["r"] = rng.standard_normal(out.shape)
        if backward:
            dx = layer.backward(p, proj["r"])
            dx = dx if isinstance(dx, tuple) else (dx,)
            for k, d in enumerate(dx):
                p.accumulate(f"input{k}", d)
        return float(np.sum(proj["r"] * out))

    return fn


def _check_layer(name: str, layer, input_shapes, rng, relu_safe: bool = False,
                 max_per_tensor: int | None = 40) -> CheckResult:
    params = ParameterStore()
    layer.init_params(params, rng)
    _randomize(params, rng)
    for k, shape in enumerate(input_shapes):
        x = _away_from_zero(rng, shape) if relu_safe else rng.standard_normal(shape)
        params.add(f"input{k}", x)
    start = time.perf_counter()
    err = grad_check(_layer_objective(layer, params, len(input_shapes), rng), params,
                     max_per_tensor=max_per_tensor, seed=int(rng.integers(1 << 31)))
    return CheckResult(name, "layer", err, time.perf_counter() - start)


def layer_checks(seed: int = 0) -> list[CheckResult]:
    """One or more checks per layer kind; names start with the kind."""
    rng = np.random.default_rng(seed)
    out = [
        _check_layer("conv 3x3", Conv2d("c", 3, 4, 3), [(3, 6, 6)], rng),
        _check_layer("conv 3x3 stride 2", Conv2d("c", 3, 4, 3, stride=2), [(3, 7, 7)], rng),
        _check_layer("conv 1x3", Conv2d("c", 3, 4, (1, 3)), [(3, 5, 6)], rng),
        _check_layer("maxpool even", MaxPool2x2("p"), [(2, 6, 6)], rng),
        _check_layer("maxpool odd", MaxPool2x2("p", replicate_odd=True), [(2, 5, 7)], rng),
        _check_layer("upsample_conv", UpsampleConv("u", 3, 2), [(3, 3, 4)], rng),
        _check_layer("concat", Concat("cat"), [(2, 4, 4), (3, 4, 4), (1, 4, 4)], rng),
        _check_layer("relu", ReLU("r"), [(3, 5, 5)], rng, relu_safe=True),
        _check_layer("residual_block", ResidualBlock("res", 3), [(3, 5, 5)], rng),
        _check_layer("bottleneck", Bottleneck("b", 5, 3), [(5, 4, 4)], rng),
    ]
    covered = {r.name.split()[0] for r in out}
    missing = set(LAYER_KINDS) - covered
    if missing:
        raise RuntimeError(f"gradient suite lacks layer kinds {sorted(missing)}")
    return out


def _composite(name: str, fn: Objective, params: ParameterStore, max_per_tensor: int | None,
               seed: int) -> CheckResult:
    start = time.perf_counter()
    err = grad_check(fn, params, max_per_tensor=max_per_tensor, seed=seed)
    return CheckResult(name, "composite", err, time.perf_counter() - start)


def _check_rpn(rng, enhanced: bool) -> CheckResult:
    head = RPNHead(6, 3, branch_channels=4, channels=5, enhanced=enhanced)
    params = ParameterStore()
    head.init_params(params, rng)
    _randomize(params, rng)
    params.add("input0", rng.standard_normal((6, 5, 5)))
    rc = rng.standard_normal((6, 5, 5))
    rr = rng.standard_normal((12, 5, 5))

    def fn(p, backward):
        cls, reg = head.forward(p, p.value("input0"))
        if backward:
            p.accumulate("input0", head.backward(p, rc, rr))
        return float(np.sum(rc * cls) + np.sum(rr * reg))

    return _composite("fe_rpn" if enhanced else "plain_rpn", fn, params, 12, int(rng.integers(1 << 31)))


def _check_hyper(rng) -> CheckResult:
    hyper = HyperFeature([4, 5, 3], bottleneck=3, out_channels=4)
    params = ParameterStore()
    hyper.init_params(params, rng)
    _randomize(params, rng)
    for k, c in enumerate((4, 5, 3)):
        params.add(f"input{k}", rng.standard_normal((c, 4, 4)))
    r = rng.standard_normal((4, 4, 4))

    def fn(p, backward):
        out = hyper.forward(p, [p.value(f"input{k}") for k in range(3)])
        if backward:
            for k, g in enumerate(hyper.backward(p, r)):
                p.accumulate(f"input{k}", g)
        return float(np.sum(r * out))

    return _composite("hyper_feature", fn, params, 15, int(rng.integers(1 << 31)))


def _check_psroi(rng) -> CheckResult:
    params = ParameterStore()
    pools = [PSRoIPool(g, 2, 2.0) for g in ADAPTIVE_GRIDS]
    for k, pool in enumerate(pools):
        params.add(f"maps{k}", rng.standard_normal((pool.expected_channels(), 9, 12)))
    rois = np.array([[1.0, 2.0, 23.0, 15.0], [4.5, 0.0, 12.2, 17.9], [0.0, 0.0, 24.0, 18.0]])
    proj = [rng.standard_normal((len(rois), 2, g.h_bins, g.w_bins)) for g in ADAPTIVE_GRIDS]

    def fn(p, backward):
        total = 0.0
        for k, pool in enumerate(pools):
            out = pool.forward(p.value(f"maps{k}"), rois)
            if backward:
                p.accumulate(f"maps{k}", pool.backward(proj[k]))
            total += float(np.sum(proj[k] * out))
        return total

    return _composite("psroi_pool", fn, params, 60, int(rng.integers(1 << 31)))


def _check_fusion(rng) -> CheckResult:
    fusion = AdaptiveFusion()
    params = ParameterStore()
    params.add("scores", rng.uniform(0.05, 0.95, (5, 4)))
    params.add("deltas", rng.standard_normal((5, 4, 4)))
    rs = rng.standard_normal(5)
    rb = rng.standard_normal((5, 4))

    def fn(p, backward):
        s, b = fusion.forward(p.value("scores"), p.value("deltas"))
        if backward:
            ds, db = fusion.backward(rs, rb)
            p.accumulate("scores", ds)
            p.accumulate("deltas", db)
        return float(np.sum(rs * s) + np.sum(rb * b))

    return _composite("adaptive_fusion", fn, params, None, int(rng.integers(1 << 31)))


def _check_refinement(rng) -> CheckResult:
    head = RefinementHead(3, ADAPTIVE_GRIDS, stride=4.0, adaptive=True)
    params = ParameterStore()
    head.init_params(params, rng)
    _randomize(params, rng, scale=0.3)
    params.add("input0", rng.standard_normal((3, 6, 7)))
    rois = np.array([[2.0, 3.0, 26.0, 20.0], [0.0, 0.0, 12.0, 9.5], [5.0, 1.0, 28.0, 24.0]])
    rs = rng.standard_normal(len(rois))
    rb = rng.standard_normal((len(rois), 4))

    def fn(p, backward):
        s, b = head.forward(p, p.value("input0"), rois)
        if backward:
            p.accumulate("input0", head.backward(p, rs, rb))
        return float(np.sum(rs * s) + np.sum(rb * b))

    return _composite("refinement_head", fn, params, 8, int(rng.integers(1 << 31)))


def toy_config() -> FENConfig:
    """A narrow full-FEN network for the end-to-end check on 32x32 input."""
    return FENConfig(backbone=BackboneConfig(widths=(3, 4, 4, 4)), rpn_branch_channels=3,
                     rpn_channels=4, bottleneck_channels=2, hyper_channels=4)


def _check_end_to_end(rng) -> CheckResult:
    spec = SceneSpec(width=32, height=32, words=(1, 2), word_height=(8, 16), aspect=(1.0, 3.0))
    image, boxes = generate_scene(spec, int(rng.integers(1000)))
    gts = np.array([b.as_array() for b in boxes])
    model = FENModel(toy_config())
    params = model.init_params(int(rng.integers(1 << 31)))
    # weights large enough that deep gradients stay well above the roundoff
    # floor of the central difference
    _randomize(params, rng, scale=0.6)
    labels = label_anchors(model.anchor_grid((4, 4)), gts, sample_cap=32, seed=rng)
    rois = centers_array(np.array([[1.0, 2.0, 30.0, 20.0], [4.0, 6.0, 18.0, 31.0], [0.0, 0.0, 32.0, 32.0]]))
    rois = np.concatenate([rois, gts])
    roi_labels, roi_tgts = roi_targets(rois, gts)

    def fn(p, backward):
        return pipeline_loss(model, p, image, labels, (rois, roi_labels, roi_tgts), backward=backward).total

    return _composite("end_to_end_loss", fn, params, 3, int(rng.integers(1 << 31)))


def _check_loss(rng) -> CheckResult:
    params = ParameterStore()
    params.add("logits", rng.standard_normal((6, 2)))
    params.add("boxes", rng.uniform(-2, 2, (6, 4)))
    classes = np.array([1, 0, 1, 1, 0, 0])
    targets = rng.uniform(-2, 2, (6, 4))

    def fn(p, backward):
        z = p.value("logits")
        e = np.exp(z - z.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        report, grads = multitask_loss(probs, classes, p.value("boxes"), targets, with_grad=True)
        if backward:
            gp = grads.probs
            p.accumulate("logits", probs * (gp - np.sum(gp * probs, axis=1, keepdims=True)))
            p.accumulate("boxes", grads.boxes)
        return report.total

    return _composite("multitask_loss", fn, params, None, int(rng.integers(1 << 31)))


def composite_checks(seed: int = 0) -> list[CheckResult]:
    # one independent stream per check so that results do not depend on order
    builders = [
        lambda rng: _check_rpn(rng, enhanced=True),
        lambda rng: _check_rpn(rng, enhanced=False),
        _check_hyper,
        _check_psroi,
        _check_fusion,
        _check_refinement,
        _check_loss,
        _check_end_to_end,
    ]
    return [build(np.random.default_rng([seed, k])) for k, build in enumerate(builders)]


def run_suite(seed: int = 0) -> list[CheckResult]:
    return layer_checks(seed) + composite_checks(seed)


def format_table(results: list[CheckResult]) -> str:
    header = f"{'group':<9} {'check':<22} {'max relerr':>10} {'time':>8}  status"
    return "\n".join([header] + [r.row() for r in results])
