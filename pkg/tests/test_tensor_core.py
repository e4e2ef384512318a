import numpy as np
import pytest

from services import tensor_core as tc
from services.errors import ArgumentError, ShapeError


def reference_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    cout, _, f, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - f) // stride + 1
    ow = (wd + 2 * pad - f) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride : i * stride + f, j * stride : j * stride + f]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


class TestPrecision:
    def test_default_is_float32(self):
        assert tc.get_dtype() is np.float32
        assert tc.zeros4(1, 2, 3, 4).dtype == np.float32

    def test_switch_to_float64(self, float64):
        assert tc.as_tensor4(np.ones((1, 1, 2, 2), dtype=np.float32)).dtype == np.float64

    def test_rejects_other_widths(self):
        with pytest.raises(ArgumentError):
            tc.set_precision(16)

    def test_as_tensor4_checks_rank(self):
        with pytest.raises(ShapeError):
            tc.as_tensor4(np.ones((2, 3)))


class TestRng:
    def test_same_seed_same_stream(self):
        a = tc.rng_gaussian(tc.Rng(7), 1.0, (100,))
        b = tc.rng_gaussian(tc.Rng(7), 1.0, (100,))
        assert np.array_equal(a, b)

    def test_forks_are_distinct_and_reproducible(self):
        base = tc.Rng(7)
        one = tc.rng_uniform_int(base.fork(1), 0, 10**6, (20,))
        two = tc.rng_uniform_int(base.fork(2), 0, 10**6, (20,))
        again = tc.rng_uniform_int(tc.Rng(7).fork(1), 0, 10**6, (20,))
        assert not np.array_equal(one, two)
        assert np.array_equal(one, again)

    def test_uniform_int_is_inclusive(self, rng):
        draws = tc.rng_uniform_int(rng, 0, 2, (2000,))
        assert set(np.unique(draws)) == {0, 1, 2}
        assert np.all(tc.rng_uniform_int(rng, 5, 5, (10,)) == 5)

    def test_gaussian_moments(self, float64):
        n, std = 1_000_000, 0.1
        draws = tc.rng_gaussian(tc.Rng(11), std, (n,))
        assert abs(draws.mean()) < 4 * std / np.sqrt(n)
        assert draws.std() == pytest.approx(std, rel=0.01)

    def test_bad_arguments(self, rng):
        with pytest.raises(ArgumentError):
            tc.rng_uniform_int(rng, 3, 2, (1,))
        with pytest.raises(ArgumentError):
            tc.rng_gaussian(rng, 0.0, (1,))
        with pytest.raises(ArgumentError):
            tc.Rng(-1)


class TestConv2dForward:
    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_matches_reference(self, float64, np_rng, stride, pad):
        x = np_rng.standard_normal((2, 3, 7, 7))
        w = np_rng.standard_normal((4, 3, 3, 3))
        out = tc.conv2d_forward(x, w, stride, pad)
        ref = reference_conv(x, w, stride, pad)
        assert out.shape == ref.shape
        assert np.allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_ones_kernel_counts_window(self):
        x = np.ones((1, 2, 4, 4), dtype=np.float32)
        w = np.ones((1, 2, 3, 3), dtype=np.float32)
        out = tc.conv2d_forward(x, w, 1, 1)
        assert out[0, 0, 0, 0] == 8.0  # 2x2 in-image corner x 2 channels
        assert out[0, 0, 1, 1] == 18.0

    def test_1x1_identity(self, np_rng):
        x = np_rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        assert np.allclose(tc.conv2d_forward(x, w), x)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            tc.conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))

    def test_unsupported_stride(self):
        with pytest.raises(ArgumentError):
            tc.conv2d_forward(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=3)


class TestConv2dBackward:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_finite_differences(self, float64, numgrad, relerr, stride):
        gen = np.random.default_rng(stride)
        for _ in range(20):
            x = gen.standard_normal((2, 2, 5, 5))
            w = gen.standard_normal((3, 2, 3, 3))
            r = gen.standard_normal(tc.conv2d_forward(x, w, stride, 1).shape)

            def loss():
                return float((tc.conv2d_forward(x, w, stride, 1) * r).sum())

            dx, dw = tc.conv2d_backward(x, w, r, stride, 1)
            assert relerr(dx, numgrad(loss, x)) < 1e-5
            assert relerr(dw, numgrad(loss, w)) < 1e-5

    def test_wrong_output_gradient_shape(self):
        x = np.ones((1, 1, 4, 4), dtype=np.float32)
        w = np.ones((2, 1, 3, 3), dtype=np.float32)
        with pytest.raises(ShapeError):
            tc.conv2d_backward(x, w, np.ones((1, 2, 3, 3), dtype=np.float32), 1, 1)


class TestIm2col:
    def test_col2im_is_adjoint(self, float64, np_rng):
        x = np_rng.standard_normal((2, 3, 6, 6))
        cols = tc.im2col(x, 3, 2, 1)
        c = np_rng.standard_normal(cols.shape)
        lhs = float((cols * c).sum())
        rhs = float((x * tc.col2im(c, x.shape, 3, 2, 1)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


class TestPooling:
    def test_avg_pool_excludes_padding(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = tc.avg_pool(x)
        assert out.shape == (1, 1, 2, 2)
        assert out[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
        assert out[0, 0, 1, 1] == pytest.approx(np.mean([5, 6, 7, 9, 10, 11, 13, 14, 15]))

    def test_avg_pool_of_constant_is_constant(self):
        out = tc.avg_pool(np.full((2, 3, 7, 7), 3.0, dtype=np.float32))
        assert out.shape == (2, 3, 4, 4)
        assert np.allclose(out, 3.0)

    def test_avg_pool_backward(self, float64, numgrad, relerr):
        gen = np.random.default_rng(3)
        for _ in range(20):
            x = gen.standard_normal((2, 2, 6, 5))
            r = gen.standard_normal(tc.avg_pool(x).shape)
            dx = tc.avg_pool_backward(x.shape, r)
            assert relerr(dx, numgrad(lambda: float((tc.avg_pool(x) * r).sum()), x)) < 1e-5

    def test_global_avg_pool(self, float64, numgrad, relerr):
        gen = np.random.default_rng(4)
        for _ in range(20):
            x = gen.standard_normal((2, 3, 4, 4))
            out = tc.global_avg_pool(x)
            assert out.shape == (2, 3, 1, 1)
            r = gen.standard_normal(out.shape)
            dx = tc.global_avg_pool_backward(x.shape, r)
            assert relerr(dx, numgrad(lambda: float((tc.global_avg_pool(x) * r).sum()), x)) < 1e-5

    def test_avg_pool_needs_two_pixels(self):
        with pytest.raises(ShapeError):
            tc.avg_pool(np.ones((1, 1, 1, 4), dtype=np.float32))
