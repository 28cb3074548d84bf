import math

import numpy as np
import pytest

from fen.geometry import boxes_from_sequence
from fen.loss import LossReport
from fen.pipeline import FENConfig, FENModel, baseline_config
from fen.synthdata import SceneSpec, generate_scene
from fen.training import StepResult, Trainer, TrainConfig, loss_row, roi_targets


@pytest.fixture(scope="module")
def scenes():
    out = []
    for index in range(4):
        image, boxes = generate_scene(SceneSpec(), index)
        out.append((image, boxes_from_sequence(boxes)))
    return out


def test_constant_rate_by_default():
    cfg = TrainConfig(iterations=100)
    assert cfg.lr_at(0) == cfg.lr_at(99) == 1e-2


def test_step_schedule():
    cfg = TrainConfig(iterations=100, lr=0.1, lr_drop_at=0.5, lr_decay=0.1)
    assert cfg.lr_at(49) == 0.1
    assert cfg.lr_at(50) == pytest.approx(0.01)


def test_roi_targets():
    gts = np.array([[50.0, 50.0, 40.0, 10.0]])
    rois = np.array([[50.0, 50.0, 40.0, 10.0], [52.0, 50.0, 40.0, 10.0], [10.0, 10.0, 8.0, 8.0]])
    labels, targets = roi_targets(rois, gts)
    assert labels.tolist() == [1, 1, 0]
    np.testing.assert_array_equal(targets[0], 0)
    assert targets[1, 0] == pytest.approx(-2 / 40)
    np.testing.assert_array_equal(targets[2], 0)


def test_roi_targets_without_ground_truth():
    labels, targets = roi_targets(np.ones((3, 4)), np.zeros((0, 4)))
    assert labels.tolist() == [0, 0, 0] and not targets.any()


def test_loss_row_format():
    res = StepResult(total=1.5, rpn=LossReport(1.0, 2.0, 0.0, 2), roi=LossReport(0.5, 0.5, 0.0, 0))
    assert loss_row(7, res) == "7,1.5,1.5,0,2"


@pytest.mark.parametrize("cfg", [FENConfig(), baseline_config()], ids=["full", "baseline"])
def test_short_run_is_finite_and_deterministic(cfg, scenes):
    runs = []
    for _ in range(2):
        model = FENModel(cfg)
        params = model.init_params(1)
        history = Trainer(model, params, TrainConfig(seed=1)).fit(scenes, 6)
        runs.append((params, [r.total for r in history]))
    assert runs[0][0].equals(runs[1][0])
    assert runs[0][1] == runs[1][1]
    assert all(math.isfinite(v) for v in runs[0][1])
    assert not runs[0][0].equals(FENModel(cfg).init_params(1))


def test_loss_decreases_on_one_scene(scenes):
    model = FENModel(baseline_config())
    params = model.init_params(0)
    history = Trainer(model, params, TrainConfig()).fit(scenes[:1], 60)
    assert np.mean([r.total for r in history[-10:]]) < np.mean([r.total for r in history[:10]])
