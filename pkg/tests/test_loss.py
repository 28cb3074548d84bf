import math

import numpy as np
import pytest

from fen.loss import (SGD, LossReport, cross_entropy, cross_entropy_grad, multitask_loss, sgd_step,
                      smooth_l1, smooth_l1_grad)
from fen.nnkit import ParameterStore


def central(f, x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        out[idx] = (f(xp) - f(xm)) / (2 * eps)
    return out


class TestCrossEntropy:
    def test_values(self):
        assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
        assert cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(math.log(2), abs=1e-15)

    def test_floor(self):
        assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-12))

    def test_bad_index(self):
        with pytest.raises(IndexError):
            cross_entropy(np.array([0.5, 0.5]), 2)

    def test_gradient(self):
        p = np.array([[0.3, 0.7], [0.9, 0.1]])
        c = np.array([1, 0])
        fd = central(lambda q: float(np.sum(cross_entropy(q, c))), p)
        assert np.max(np.abs(cross_entropy_grad(p, c) - fd)) < 1e-6


class TestSmoothL1:
    def test_values(self):
        b = np.array([0.1, 0.2, 0.3, 0.4])
        assert smooth_l1(b, b) == 0.0
        assert smooth_l1(np.array([2.0, 0, 0, 0]), np.zeros(4)) == 1.5
        assert smooth_l1(np.array([0.5, 0, 0, 0]), np.zeros(4)) == 0.125

    def test_continuous_at_one(self):
        z = np.zeros(4)
        lo = smooth_l1(np.array([1 - 1e-9, 0, 0, 0]), z)
        hi = smooth_l1(np.array([1 + 1e-9, 0, 0, 0]), z)
        assert abs(hi - lo) < 1e-8
        glo = smooth_l1_grad(np.array([1 - 1e-9, 0, 0, 0]), z)[0]
        ghi = smooth_l1_grad(np.array([1 + 1e-9, 0, 0, 0]), z)[0]
        assert abs(ghi - glo) < 1e-8

    def test_gradient(self):
        rng = np.random.default_rng(0)
        b, g = rng.uniform(-3, 3, (5, 4)), rng.uniform(-3, 3, (5, 4))
        fd = central(lambda x: float(np.sum(smooth_l1(x, g))), b)
        np.testing.assert_allclose(smooth_l1_grad(b, g), fd, atol=1e-6)


class TestMultitask:
    def test_perfect(self):
        rep = multitask_loss(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([1, 0]),
                             np.ones((2, 4)), np.ones((2, 4)))
        assert rep.total == 0.0 and rep.n_matched == 1

    def test_single_positive_half_confident(self):
        rep = multitask_loss(np.array([[0.5, 0.5]]), np.array([1]), np.zeros((1, 4)), np.zeros((1, 4)))
        assert rep.total == pytest.approx(math.log(2), abs=1e-15)

    def test_identity_and_linearity(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet([1, 1], 6)
        c = np.array([1, 0, 1, 1, 0, 0])
        b, g = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        r1 = multitask_loss(p, c, b, g, lam=1.0)
        r2 = multitask_loss(p, c, b, g, lam=2.0)
        assert r1.total == (r1.cls_term + r1.loc_term) / 3
        assert r2.loc_term == r1.loc_term
        assert r2.total - r2.cls_term / 3 == pytest.approx(2 * (r1.total - r1.cls_term / 3), rel=1e-14)
        # negatives never enter the localisation term
        b2 = b.copy()
        b2[c == 0] += 100
        assert multitask_loss(p, c, b2, g).total == r1.total

    def test_no_positives_divides_by_one(self):
        rep = multitask_loss(np.array([[0.5, 0.5]]), np.array([0]), np.zeros((1, 4)), np.ones((1, 4)))
        assert rep.total == pytest.approx(math.log(2)) and rep.loc_term == 0

    def test_gradients(self):
        rng = np.random.default_rng(2)
        p = rng.dirichlet([1, 1], 4)
        c = np.array([1, 0, 1, 0])
        b, g = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        _, grads = multitask_loss(p, c, b, g, lam=1.5, with_grad=True)
        fd_p = central(lambda x: multitask_loss(x, c, b, g, lam=1.5).total, p)
        fd_b = central(lambda x: multitask_loss(p, c, x, g, lam=1.5).total, b)
        np.testing.assert_allclose(grads.probs, fd_p, atol=1e-6)
        np.testing.assert_allclose(grads.boxes, fd_b, atol=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            multitask_loss(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 4)))

    def test_report_rejects_non_finite(self):
        with pytest.raises(FloatingPointError):
            LossReport(float("nan"), 0.0, 0.0, 0)


class TestSGD:
    def store(self, value, grad):
        params = ParameterStore()
        params.add("theta", np.array([value]))
        params.accumulate("theta", np.array([grad]))
        return params

    def test_single_step(self):
        params = self.store(1.0, 1.0)
        sgd_step(params, lr=0.1, momentum=0.0)
        assert params.value("theta")[0] == pytest.approx(0.9, abs=1e-15)
        assert params.grad("theta")[0] == 0.0

    def test_zero_gradient(self):
        params = self.store(1.25, 0.0)
        SGD(params, lr=0.1).step()
        assert params.value("theta")[0] == 1.25

    def test_momentum_accumulates(self):
        params = self.store(0.0, 1.0)
        opt = SGD(params, lr=0.1, momentum=0.5)
        opt.step()
        params.accumulate("theta", np.array([1.0]))
        opt.step()
        assert params.value("theta")[0] == pytest.approx(-0.1 - 0.15)

    def test_quadratic_bowl(self):
        params = ParameterStore()
        params.add("theta", np.array([1.0, -2.0]))
        opt = SGD(params, lr=0.1, momentum=0.0)
        for step in range(1, 201):
            params.accumulate("theta", params.value("theta").copy())  # grad of 0.5 |theta|^2
            opt.step()
            if np.max(np.abs(params.value("theta"))) < 1e-6:
                break
        assert step <= 200 and np.max(np.abs(params.value("theta"))) < 1e-6

    def test_clipping_scales_update(self):
        params = self.store(0.0, 100.0)
        norm = SGD(params, lr=0.1, momentum=0.0, clip_norm=1.0).step()
        assert norm == 100.0
        assert params.value("theta")[0] == pytest.approx(-0.1)

    def test_non_finite_gradient_names_tensor(self):
        params = ParameterStore()
        params.add("stage2.conv.weight", np.zeros(3))
        params.accumulate("stage2.conv.weight", np.array([0.0, np.inf, 0.0]))
        with pytest.raises(FloatingPointError, match="stage2.conv.weight"):
            SGD(params).step()
