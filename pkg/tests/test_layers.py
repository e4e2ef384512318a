import math

import numpy as np
import pytest

from services.errors import ArgumentError, ShapeError, UsageError
from services.layers import (
    BatchNormLayer,
    BatchNormState,
    ReLULayer,
    batchnorm_backward,
    batchnorm_forward,
    relu,
    relu_backward,
    softmax,
    softmax_cross_entropy,
    zero_pad_channels,
    zero_pad_channels_backward,
)


class TestBatchNormForward:
    def test_train_mode_normalizes(self, float64):
        # one channel with mean 5 and biased variance 4
        x = np.array([3.0, 7.0] * 4).reshape(2, 1, 2, 2)
        y, _ = batchnorm_forward(x, BatchNormState(channels=1), "train")
        assert abs(y.mean()) < 1e-12
        assert abs(y.std() - 1.0) < 1e-5

    def test_running_moments_ema(self, float64):
        state = BatchNormState(channels=1)
        x = np.array([3.0, 7.0] * 4).reshape(2, 1, 2, 2)
        batchnorm_forward(x, state, "train")
        assert state.running_mean[0] == pytest.approx(0.5)
        assert state.running_var[0] == pytest.approx(0.9 + 0.1 * 4.0)

    def test_infer_uses_running_moments(self, float64):
        state = BatchNormState(channels=2)
        state.running_mean[:] = [1.0, -1.0]
        state.running_var[:] = [4.0, 1.0]
        x = np.zeros((1, 2, 1, 1))
        y, _ = batchnorm_forward(x, state, "infer")
        assert y[0, 0, 0, 0] == pytest.approx(-1.0 / math.sqrt(4.0 + 1e-5))
        assert y[0, 1, 0, 0] == pytest.approx(1.0 / math.sqrt(1.0 + 1e-5))

    def test_collect_records_without_ema(self, float64):
        layer = BatchNormLayer("bn", 1)
        x = np.array([3.0, 7.0] * 4).reshape(2, 1, 2, 2)
        layer.forward(x, "collect")
        assert layer.state.running_mean[0] == 0.0
        assert layer.state.running_var[0] == 1.0
        mean, var = layer.collected[0]
        assert mean[0] == pytest.approx(5.0)
        assert var[0] == pytest.approx(4.0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            batchnorm_forward(np.ones((2, 3, 2, 2)), BatchNormState(channels=2), "train")

    def test_single_value_per_channel(self):
        with pytest.raises(ArgumentError):
            batchnorm_forward(np.ones((1, 1, 1, 1)), BatchNormState(channels=1), "train")


class TestBatchNormBackward:
    @pytest.mark.parametrize("learn_affine", [False, True])
    def test_finite_differences(self, float64, numgrad, relerr, learn_affine):
        gen = np.random.default_rng(11)
        for _ in range(20):
            x = gen.standard_normal((2, 3, 4, 4)) * 2.0 + 1.0
            state = BatchNormState(channels=3, learn_affine=learn_affine)
            state.gamma[:] = gen.uniform(0.5, 1.5, 3)
            state.beta[:] = gen.standard_normal(3)
            r = gen.standard_normal(x.shape)

            def loss():
                return float((batchnorm_forward(x, state, "train")[0] * r).sum())

            _, cache = batchnorm_forward(x, state, "train")
            dx, dgamma, dbeta = batchnorm_backward(cache, r)
            assert relerr(dx, numgrad(loss, x)) < 1e-5
            if learn_affine:
                assert relerr(dgamma, numgrad(loss, state.gamma)) < 1e-5
                assert relerr(dbeta, numgrad(loss, state.beta)) < 1e-5
            else:
                assert dgamma is None and dbeta is None

    def test_needs_train_cache(self, float64):
        _, cache = batchnorm_forward(np.ones((2, 1, 2, 2)), BatchNormState(channels=1), "infer")
        with pytest.raises(UsageError):
            batchnorm_backward(cache, np.ones((2, 1, 2, 2)))

    def test_frozen_layer_has_no_parameters(self):
        assert BatchNormLayer("bn", 4).parameters() == []
        assert [p.name for p in BatchNormLayer("bn", 4, learn_affine=True).parameters()] == ["bn.gamma", "bn.beta"]

    def test_layer_backward_without_forward(self):
        with pytest.raises(UsageError):
            BatchNormLayer("bn", 1).backward(np.ones((2, 1, 2, 2)))


class TestReLU:
    def test_forward_and_mask(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1)
        assert relu(x).ravel().tolist() == [0.0, 0.0, 2.0]
        assert relu_backward(x, np.ones_like(x)).ravel().tolist() == [0.0, 0.0, 1.0]

    def test_finite_differences(self, float64, numgrad, relerr):
        gen = np.random.default_rng(5)
        for _ in range(20):
            x = gen.standard_normal((2, 3, 3, 3))
            x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
            r = gen.standard_normal(x.shape)
            dx = relu_backward(x, r)
            assert relerr(dx, numgrad(lambda: float((relu(x) * r).sum()), x)) < 1e-5

    def test_layer_needs_train_forward(self):
        layer = ReLULayer("relu")
        layer.forward(np.ones((1, 1, 2, 2)), "infer")
        with pytest.raises(UsageError):
            layer.backward(np.ones((1, 1, 2, 2)))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        out = softmax_cross_entropy(np.zeros((4, 10, 1, 1), dtype=np.float32), np.arange(4))
        assert out.loss == pytest.approx(math.log(10), rel=1e-6)

    def test_finite_differences(self, float64, numgrad, relerr):
        gen = np.random.default_rng(6)
        for _ in range(20):
            logits = gen.standard_normal((5, 7, 1, 1)) * 3.0
            labels = gen.integers(0, 7, 5)
            out = softmax_cross_entropy(logits, labels)
            num = numgrad(lambda: softmax_cross_entropy(logits, labels).loss, logits)
            assert relerr(out.dlogits, num) < 1e-5

    def test_shift_invariant_per_sample(self, float64, np_rng):
        logits = np_rng.standard_normal((6, 10, 1, 1))
        labels = np_rng.integers(0, 10, 6)
        shifted = logits + np_rng.uniform(-50, 50, (6, 1, 1, 1))
        a, b = softmax_cross_entropy(logits, labels), softmax_cross_entropy(shifted, labels)
        assert b.loss == pytest.approx(a.loss, rel=1e-10)
        assert np.allclose(a.dlogits, b.dlogits, rtol=0, atol=1e-12)

    def test_saturated_one_hot(self):
        labels = np.array([3, 0, 9])
        logits = np.zeros((3, 10, 1, 1))
        logits[np.arange(3), labels] = 1e6
        out = softmax_cross_entropy(logits, labels)
        assert out.loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(out.dlogits))

    def test_softmax_sums_to_one(self, np_rng):
        p = softmax(np_rng.standard_normal((3, 5)) * 50.0)
        assert np.allclose(p.sum(axis=1), 1.0)

    def test_label_out_of_range(self):
        with pytest.raises(ArgumentError):
            softmax_cross_entropy(np.zeros((2, 3, 1, 1)), np.array([0, 3]))

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeError):
            softmax_cross_entropy(np.zeros((2, 3, 1, 1)), np.array([0]))


class TestZeroPadChannels:
    def test_pads_with_zeros(self):
        x = np.ones((2, 3, 4, 4), dtype=np.float32)
        y = zero_pad_channels(x, 5)
        assert y.shape == (2, 5, 4, 4)
        assert np.all(y[:, :3] == 1) and np.all(y[:, 3:] == 0)

    def test_backward_drops_padded_channels(self):
        dy = np.arange(2 * 5 * 1 * 1, dtype=np.float32).reshape(2, 5, 1, 1)
        assert np.array_equal(zero_pad_channels_backward(dy, 3), dy[:, :3])

    def test_cannot_shrink(self):
        with pytest.raises(ArgumentError):
            zero_pad_channels(np.ones((1, 4, 2, 2)), 2)
