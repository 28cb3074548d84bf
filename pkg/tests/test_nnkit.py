import struct

import numpy as np
import pytest

from fen.nnkit import (LAYER_KINDS, BackwardBeforeForward, Bottleneck, Concat, Conv2d, MaxPool2x2,
                       ParameterStore, ReLU, ResidualBlock, ShapeError, UpsampleConv, grad_check,
                       load_checkpoint, relative_error, save_checkpoint)

from oracles import brute_conv


def make(layer, seed=0):
    params = ParameterStore()
    layer.init_params(params, np.random.default_rng(seed))
    return params


class TestConv:
    def test_identity_1x1(self):
        layer = Bottleneck("b", 3, 3)
        params = make(layer)
        params.set_value("b.weight", np.eye(3).reshape(3, 3, 1, 1))
        x = np.random.default_rng(1).standard_normal((3, 4, 5))
        np.testing.assert_array_equal(layer.forward(params, x), x)

    def test_hand_convolution(self):
        layer = Conv2d("c", 1, 1, 3)
        params = make(layer)
        params.set_value("c.weight", np.ones((1, 1, 3, 3)))
        out = layer.forward(params, np.ones((1, 3, 3)))
        assert out[0, 1, 1] == 9
        assert out[0, 0, 0] == 4

    @pytest.mark.parametrize("kernel,stride", [(3, 1), (3, 2), ((1, 3), 1), (1, 1)])
    def test_matches_direct_loops(self, kernel, stride):
        layer = Conv2d("c", 3, 4, kernel, stride=stride)
        params = make(layer)
        params.set_value("c.bias", np.arange(4.0))
        x = np.random.default_rng(2).standard_normal((3, 7, 6))
        ref = brute_conv(x, params.value("c.weight"), params.value("c.bias"), stride, layer.pad)
        np.testing.assert_allclose(layer.forward(params, x), ref, rtol=1e-12, atol=1e-12)

    def test_glorot_uniform_bounds(self):
        layer = Conv2d("c", 8, 16, 3)
        w = make(layer).value("c.weight")
        limit = np.sqrt(6.0 / (8 * 9 + 16 * 9))
        assert np.abs(w).max() <= limit
        assert np.abs(w).max() > 0.9 * limit

    def test_shape_error_names_layer(self):
        layer = Conv2d("stage9", 3, 4, 3)
        with pytest.raises(ShapeError, match="stage9"):
            layer.forward(make(layer), np.zeros((2, 5, 5)))

    def test_deterministic(self):
        layer = Conv2d("c", 2, 3, 3)
        params = make(layer)
        x = np.random.default_rng(3).standard_normal((2, 6, 6))
        assert np.array_equal(layer.forward(params, x), layer.forward(params, x))


class TestOtherLayers:
    def test_maxpool_basic(self):
        out = MaxPool2x2("p").forward(ParameterStore(), np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4

    def test_maxpool_routes_gradient_to_argmax(self):
        pool = MaxPool2x2("p")
        pool.forward(ParameterStore(), np.array([[[1.0, 2.0], [5.0, 4.0]]]))
        np.testing.assert_array_equal(pool.backward(ParameterStore(), np.ones((1, 1, 1))),
                                      [[[0, 0], [1, 0]]])

    def test_maxpool_odd_replicates(self):
        x = np.arange(15.0).reshape(1, 3, 5)
        out = MaxPool2x2("p", replicate_odd=True).forward(ParameterStore(), x)
        assert out.shape == (1, 2, 3)
        assert out[0, 1, 2] == 14

    def test_relu_backward_negative(self):
        relu = ReLU("r")
        relu.forward(ParameterStore(), np.array([[[-1.0, 2.0]]]))
        np.testing.assert_array_equal(relu.backward(ParameterStore(), np.ones((1, 1, 2))), [[[0, 1]]])

    def test_concat_backward_splits(self):
        cat = Concat("c")
        a, b = np.zeros((2, 3, 3)), np.zeros((1, 3, 3))
        cat.forward(ParameterStore(), a, b)
        g = np.random.default_rng(0).standard_normal((3, 3, 3))
        ga, gb = cat.backward(ParameterStore(), g)
        np.testing.assert_array_equal(ga, g[:2])
        np.testing.assert_array_equal(gb, g[2:])

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            Concat("c").forward(ParameterStore(), np.zeros((1, 3, 3)), np.zeros((1, 3, 4)))

    def test_upsample_conv_dims(self):
        layer = UpsampleConv("u", 3, 5)
        assert layer.forward(make(layer), np.zeros((3, 4, 6))).shape == (5, 8, 12)

    def test_residual_identity_at_init(self):
        layer = ResidualBlock("res", 4)
        x = np.random.default_rng(4).standard_normal((4, 5, 5))
        np.testing.assert_array_equal(layer.forward(make(layer), x), x)

    def test_backward_before_forward(self):
        for layer in (Conv2d("c", 1, 1, 3), ReLU("r"), MaxPool2x2("p"), Concat("k")):
            with pytest.raises(BackwardBeforeForward):
                layer.backward(ParameterStore(), np.zeros((1, 2, 2)))

    def test_gradients_accumulate(self):
        layer = Conv2d("c", 1, 1, 1)
        params = make(layer)
        x = np.ones((1, 2, 2))
        for _ in range(2):
            layer.forward(params, x)
            layer.backward(params, np.ones((1, 2, 2)))
        assert params.grad("c.bias")[0] == 8


class TestGradCheck:
    def test_linear_exact(self):
        params = ParameterStore()
        params.add("t", np.array([1.5, -2.0]))
        coef = np.array([3.0, 7.0])

        def fn(p, backward):
            if backward:
                p.accumulate("t", coef)
            return float(coef @ p.value("t"))

        assert grad_check(fn, params) < 1e-10

    def test_quadratic(self):
        params = ParameterStore()
        params.add("t", np.array([3.0]))

        def fn(p, backward):
            t = p.value("t")[0]
            if backward:
                p.accumulate("t", np.array([2 * t]))
            return t * t

        assert grad_check(fn, params) < 1e-9

    def test_detects_wrong_gradient(self):
        params = ParameterStore()
        params.add("t", np.array([3.0]))

        def fn(p, backward):
            t = p.value("t")[0]
            if backward:
                p.accumulate("t", np.array([2.1 * t]))
            return t * t

        assert grad_check(fn, params) > 1e-3

    def test_non_finite_raises(self):
        params = ParameterStore()
        params.add("t", np.array([1.0]))
        with pytest.raises(FloatingPointError):
            grad_check(lambda p, b: float("nan"), params)

    def test_relative_error_floor(self):
        assert relative_error(np.array(0.0), np.array(1e-12)) == pytest.approx(1e-4)

    def test_every_layer_kind_passes(self):
        from fen.gradcheck import layer_checks
        results = layer_checks(seed=11)
        kinds = {r.name.split()[0] for r in results}
        assert kinds == set(LAYER_KINDS)
        for r in results:
            assert r.max_rel_error < 1e-5, r.row()


class TestParameterStore:
    def test_duplicate_name(self):
        params = ParameterStore()
        params.add("a", np.zeros(2))
        with pytest.raises(KeyError):
            params.add("a", np.zeros(2))

    def test_set_value_shape_checked(self):
        params = ParameterStore()
        params.add("a", np.zeros(2))
        with pytest.raises(ValueError):
            params.set_value("a", np.zeros(3))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = ParameterStore()
        params.add("conv.weight", np.random.default_rng(0).standard_normal((2, 3, 1, 3)))
        params.add("conv.bias", np.array([0.5, -0.25]))
        path = tmp_path / "m.fenk"
        save_checkpoint(params, path)
        assert load_checkpoint(path).equals(params)

    def test_byte_layout(self, tmp_path):
        params = ParameterStore()
        params.add("w", np.array([[1.0, 2.0]]))
        path = tmp_path / "m.fenk"
        save_checkpoint(params, path)
        expected = (b"FENK" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w"
                    + struct.pack("<B", 2) + struct.pack("<II", 1, 2) + struct.pack("<2d", 1.0, 2.0))
        assert path.read_bytes() == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fenk"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError):
            load_checkpoint(path)
