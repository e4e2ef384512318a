import math

import numpy as np
import pytest

from services import tensor_core as tc
from services.binarize import (
    PLAIN_GAIN,
    RESNET_GAIN,
    ConvLayer,
    ConvLayerState,
    binarize_weights,
    binarized_conv_backward,
    binarized_conv_forward,
    layer_scale,
)
from services.errors import ArgumentError, UsageError


def wide_resnet_fan_ins():
    """Every (F, Cin) that occurs in the 20-k builds for k = 1..10."""
    pairs = {(3, 1), (3, 3)}
    for k in range(1, 11):
        for c in (16 * k, 32 * k, 64 * k):
            pairs.add((3, c))
        pairs.add((1, 64 * k))
    return sorted(pairs)


class TestLayerScale:
    def test_first_layer_value(self):
        assert layer_scale(3, 3, RESNET_GAIN) == pytest.approx(0.272166, abs=1e-6)

    @pytest.mark.parametrize("kernel,cin", wide_resnet_fan_ins())
    def test_extended_precision(self, kernel, cin):
        for gain, exact_gain in ((RESNET_GAIN, np.sqrt(np.longdouble(2))), (PLAIN_GAIN, np.longdouble(2))):
            exact = exact_gain / np.sqrt(np.longdouble(kernel * kernel * cin))
            assert abs(layer_scale(kernel, cin, gain) - float(exact)) <= 1e-6 * float(exact)

    def test_invalid(self):
        with pytest.raises(ArgumentError):
            layer_scale(0, 3, RESNET_GAIN)
        with pytest.raises(ArgumentError):
            layer_scale(3, 3, 0.0)


class TestBinarizeWeights:
    def test_sign_of_zero_is_plus(self):
        w = np.array([-0.5, 0.0, 0.3], dtype=np.float32)
        assert binarize_weights(w, 0.25).tolist() == [-0.25, 0.25, 0.25]

    def test_values_are_plus_minus_scale(self, np_rng):
        w = np_rng.standard_normal((8, 4, 3, 3)).astype(np.float32)
        s = layer_scale(3, 4, RESNET_GAIN)
        w_hat = binarize_weights(w, s)
        assert sorted(np.unique(w_hat).tolist()) == [float(np.float32(-s)), float(np.float32(s))]
        assert w_hat.dtype == np.float32

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ArgumentError):
            binarize_weights(np.ones(3), -1.0)


class TestBinarizedConv:
    def _layer(self, gen, cin=3, cout=5, stride=1):
        st = ConvLayerState(cout=cout, cin=cin, kernel=3, stride=stride, binarized=True)
        st.weights[...] = gen.standard_normal(st.weights.shape)
        return st

    @pytest.mark.parametrize("stride", [1, 2])
    def test_forward_equals_reference_bitwise(self, np_rng, stride):
        st = self._layer(np_rng, stride=stride)
        x = np_rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w_hat = np.where(st.weights >= 0, st.scale, -st.scale).astype(np.float32)
        assert np.array_equal(binarized_conv_forward(x, st), tc.conv2d_forward(x, w_hat, stride, 1))

    def test_backward_is_straight_through(self, float64, np_rng):
        st = self._layer(np_rng)
        x = np_rng.standard_normal((2, 3, 6, 6))
        dy = np_rng.standard_normal((2, 5, 6, 6))
        dx, dw = binarized_conv_backward(x, st, dy)
        ref_dx, ref_dw = tc.conv2d_backward(x, binarize_weights(st.weights, st.scale), dy, 1, 1)
        assert np.array_equal(dx, ref_dx)
        assert np.array_equal(dw, ref_dw)

        # only the signs of the shadow weights matter
        st.weights *= 7.0
        _, dw_scaled = binarized_conv_backward(x, st, dy)
        assert np.array_equal(dw, dw_scaled)

    def test_full_precision_layer_rejected(self):
        st = ConvLayerState(cout=2, cin=2, kernel=3, binarized=False)
        x = np.ones((1, 2, 4, 4), dtype=np.float32)
        with pytest.raises(UsageError):
            binarized_conv_forward(x, st)
        with pytest.raises(UsageError):
            binarized_conv_backward(x, st, np.ones((1, 2, 4, 4), dtype=np.float32))

    def test_stride_must_be_one_or_two(self):
        with pytest.raises(ArgumentError):
            ConvLayerState(cout=2, cin=2, kernel=3, stride=3)


class TestConvLayer:
    def test_parameter_shares_shadow_weights(self):
        layer = ConvLayer("conv", 2, 4, 3, binarized=True)
        (param,) = layer.parameters()
        param.value -= 1.0
        assert np.all(layer.state.weights == -1.0)

    def test_scale_uses_gain(self):
        assert ConvLayer("a", 16, 16, 3).state.scale == pytest.approx(math.sqrt(2) / 12)
        assert ConvLayer("b", 16, 16, 3, gain=PLAIN_GAIN).state.scale == pytest.approx(2 / 12)

    def test_backward_sets_gradient(self, np_rng):
        layer = ConvLayer("conv", 2, 3, 3, binarized=True)
        layer.state.weights[...] = np_rng.standard_normal(layer.state.weights.shape)
        x = np_rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
        y = layer.forward(x, "train")
        dx = layer.backward(np.ones_like(y))
        assert dx.shape == x.shape
        assert layer.weight.grad.shape == layer.state.weights.shape

    def test_backward_needs_train_forward(self):
        layer = ConvLayer("conv", 1, 1, 3)
        layer.forward(np.ones((1, 1, 4, 4), dtype=np.float32), "infer")
        with pytest.raises(UsageError):
            layer.backward(np.ones((1, 1, 4, 4), dtype=np.float32))
