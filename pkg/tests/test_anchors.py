import itertools
import math

import numpy as np
import pytest

from fen.anchors import (IGNORE, NEGATIVE, POSITIVE, RATIOS, SCALES, AnchorSpec, anchor_shapes,
                         build_anchor_set, label_anchors, place_anchors)
from fen.geometry import iou_matrix
from fen.synthdata import SceneSpec, generate_scene


def test_twenty_four_anchors():
    assert len(build_anchor_set()) == 24
    assert anchor_shapes().shape == (24, 2)


def test_widest_six_are_pruned():
    kept = {(a.scale, a.aspect_ratio) for a in build_anchor_set()}
    everything = list(itertools.product(SCALES, RATIOS))
    widths = {sr: sr[0] * math.sqrt(sr[1]) for sr in everything}
    pruned = set(everything) - kept
    assert (416, 6) in pruned
    assert len(pruned) == 6
    assert min(widths[p] for p in pruned) > max(widths[k] for k in kept)


def test_sorted_by_scale_then_ratio():
    specs = [(a.scale, a.aspect_ratio) for a in build_anchor_set()]
    assert specs == sorted(specs)


def test_shape_convention():
    assert (AnchorSpec(32, 1).width, AnchorSpec(32, 1).height) == (32, 32)
    a = AnchorSpec(64, 4)
    assert (a.width, a.height) == (128, 32)
    assert a.width * a.height == pytest.approx(64 * 64)


def test_spec_validation():
    with pytest.raises(ValueError):
        AnchorSpec(32, 0.5)
    with pytest.raises(ValueError):
        AnchorSpec(0, 1)


class TestPlacement:
    def test_single_cell(self):
        grid = place_anchors((1, 1), 8)
        assert len(grid) == 24
        assert np.all(grid.boxes[:, 0] == 4) and np.all(grid.boxes[:, 1] == 4)

    def test_count(self):
        assert len(place_anchors((2, 3), 8)) == 144

    def test_cell_center(self):
        grid = place_anchors((2, 3), 8)
        cell = grid.boxes.reshape(2, 3, 24, 4)[1, 2]
        assert np.all(cell[:, 0] == 20) and np.all(cell[:, 1] == 12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            place_anchors((0, 3), 8)


class TestLabelling:
    def test_exact_match_positive_zero_target(self):
        anchors = np.array([[50, 50, 64, 32], [10, 10, 8, 8]], float)
        lab = label_anchors(anchors, anchors[:1], sample_cap=256)
        assert lab.labels[0] == POSITIVE
        np.testing.assert_array_equal(lab.targets[0], 0)
        assert lab.labels[1] == NEGATIVE

    def test_no_ground_truth_all_negative(self):
        lab = label_anchors(place_anchors((4, 4), 8), np.zeros((0, 4)), sample_cap=1000)
        assert np.all(lab.labels == NEGATIVE)

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            label_anchors(np.ones((1, 4)), np.ones((1, 4)), pos_thr=0.3, neg_thr=0.7)

    def test_every_gt_matched_on_random_scenes(self):
        grid = place_anchors((16, 16), 8)
        spec = SceneSpec()
        for index in range(100):
            _, boxes = generate_scene(spec, index)
            gts = np.array([b.as_array() for b in boxes])
            lab = label_anchors(grid, gts, sample_cap=10**6, seed=index)
            ov = iou_matrix(grid.boxes, gts)
            for g in range(len(gts)):
                best = np.flatnonzero(ov[:, g] == ov[:, g].max())
                assert np.all(lab.labels[best] == POSITIVE)
            # labels are mutually exclusive by construction; check the thresholds
            best_iou = ov.max(axis=1)
            assert np.all(best_iou[lab.labels == NEGATIVE] < 0.3)
            high = best_iou >= 0.7
            assert np.all(lab.labels[high] == POSITIVE)

    def test_subsample_cap_and_balance(self):
        grid = place_anchors((16, 16), 8)
        gts = np.array([[40, 40, 64, 32], [90, 90, 128, 32]], float)
        lab = label_anchors(grid, gts, sample_cap=64, seed=0)
        kept = lab.labels != IGNORE
        assert kept.sum() <= 64
        assert (lab.labels == POSITIVE).sum() <= 32

    def test_seeded_subsample_is_deterministic(self):
        grid = place_anchors((16, 16), 8)
        gts = np.array([[40, 40, 64, 32]], float)
        a = label_anchors(grid, gts, seed=5)
        b = label_anchors(grid, gts, seed=5)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_positive_targets_finite(self):
        grid = place_anchors((16, 16), 8)
        gts = np.array([[40, 40, 64, 32], [100, 20, 30, 10]], float)
        lab = label_anchors(grid, gts, seed=1)
        assert np.all(np.isfinite(lab.targets[lab.labels == POSITIVE]))
