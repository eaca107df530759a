import numpy as np
import pytest

from lightstereo import ops
from lightstereo.ops import (
    BatchNormParams,
    ConfigurationError,
    ConvParams,
    NumericError,
)

from oracles import (
    bilinear_point,
    conv2d_loops,
    correlate2d_per_channel,
    rel_err,
)


def rnd(shape, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        y = ops.conv2d(x, ConvParams(w, padding=(1, 1)))
        np.testing.assert_array_equal(y, x)

    def test_zero_weights(self):
        x = rnd((2, 3, 5, 5), seed=1)
        w = np.zeros((4, 3, 3, 3), dtype=np.float32)
        y = ops.conv2d(x, ConvParams(w, padding=(1, 1)))
        assert np.all(y == 0)

    def test_strided_matches_loop_oracle(self):
        x = rnd((1, 2, 4, 4), seed=2)
        w = rnd((3, 2, 3, 3), seed=3)
        y = ops.conv2d(x, ConvParams(w, stride=(2, 2), padding=(1, 1)))
        ref = conv2d_loops(x, w, stride=(2, 2), padding=(1, 1))
        assert y.shape == (1, 3, 2, 2)
        assert rel_err(y, ref) < 1e-5

    def test_bias(self):
        x = rnd((1, 2, 4, 4), seed=4)
        w = rnd((3, 2, 1, 1), seed=5)
        b = np.array([1.0, -2.0, 0.5], dtype=np.float32)
        y = ops.conv2d(x, ConvParams(w, bias=b))
        ref = conv2d_loops(x, w, bias=b)
        assert rel_err(y, ref) < 1e-5

    @pytest.mark.parametrize("seed", range(10))
    def test_randomized_against_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 5))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        sh = int(rng.integers(1, 3))
        ph, pw = int(rng.integers(0, 2)), int(rng.integers(0, 2))
        h = int(rng.integers(kh, kh + 5))
        w = int(rng.integers(kw, kw + 5))
        x = rng.standard_normal((n, c_in, h, w)).astype(np.float32)
        wt = rng.standard_normal((c_out, c_in, kh, kw)).astype(np.float32)
        p = ConvParams(wt, stride=(sh, sh), padding=(ph, pw))
        assert rel_err(ops.conv2d(x, p), conv2d_loops(x, wt, stride=(sh, sh), padding=(ph, pw))) < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_depthwise_matches_per_channel_oracle(self, seed):
        rng = np.random.default_rng(200 + seed)
        c = int(rng.integers(1, 6))
        x = rng.standard_normal((2, c, 6, 7)).astype(np.float32)
        wt = rng.standard_normal((c, 1, 3, 3)).astype(np.float32)
        p = ConvParams(wt, padding=(1, 1), groups=c)
        ref = correlate2d_per_channel(x, wt[:, 0], padding=(1, 1))
        assert rel_err(ops.conv2d(x, p), ref) < 1e-5

    def test_grouped(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 4, 5, 5)).astype(np.float32)
        wt = rng.standard_normal((6, 2, 3, 3)).astype(np.float32)
        p = ConvParams(wt, padding=(1, 1), groups=2)
        ref = conv2d_loops(x, wt, padding=(1, 1), groups=2)
        assert rel_err(ops.conv2d(x, p), ref) < 1e-5

    @pytest.mark.parametrize("k", [1, 3, 5, 7, 11, 21])
    def test_same_padding_preserves_dims(self, k):
        x = rnd((1, 2, 24, 30), seed=k)
        w_sq = rnd((2, 2, k, k), seed=k + 1)
        assert ops.conv2d(x, ConvParams(w_sq, padding=((k - 1) // 2, (k - 1) // 2))).shape == x.shape
        # strip kernels k x 1 and 1 x k
        w_v = rnd((2, 2, k, 1), seed=k + 2)
        assert ops.conv2d(x, ConvParams(w_v, padding=((k - 1) // 2, 0))).shape == x.shape
        w_h = rnd((2, 2, 1, k), seed=k + 3)
        assert ops.conv2d(x, ConvParams(w_h, padding=(0, (k - 1) // 2))).shape == x.shape

    def test_strip_kernels_match_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 3, 9, 9)).astype(np.float32)
        for kh, kw in [(7, 1), (1, 7)]:
            wt = rng.standard_normal((3, 1, kh, kw)).astype(np.float32)
            pad = ((kh - 1) // 2, (kw - 1) // 2)
            p = ConvParams(wt, padding=pad, groups=3)
            ref = conv2d_loops(x, wt, padding=pad, groups=3)
            assert rel_err(ops.conv2d(x, p), ref) < 1e-5

    def test_channel_mismatch_raises(self):
        x = rnd((1, 2, 4, 4))
        w = rnd((3, 4, 3, 3))
        with pytest.raises(ConfigurationError):
            ops.conv2d(x, ConvParams(w, padding=(1, 1)))

    def test_nonfinite_input_raises(self):
        x = rnd((1, 1, 3, 3))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            ops.conv2d(x, ConvParams(rnd((1, 1, 1, 1))))

    def test_deterministic(self):
        x = rnd((2, 3, 8, 8), seed=21)
        w = rnd((4, 3, 3, 3), seed=22)
        p = ConvParams(w, padding=(1, 1))
        a = ops.conv2d(x, p)
        b = ops.conv2d(x, p)
        assert np.array_equal(a, b)


class TestConvBackward:
    def test_zero_grad_out(self):
        x = rnd((1, 2, 4, 4))
        w = rnd((2, 2, 3, 3))
        p = ConvParams(w, bias=np.zeros(2, dtype=np.float32), padding=(1, 1))
        gx, gw, gb = ops.conv2d_backward(x, p, np.zeros((1, 2, 4, 4), dtype=np.float32))
        assert np.all(gx == 0) and np.all(gw == 0) and np.all(gb == 0)

    def test_single_pixel_1x1(self):
        # one pixel, 1x1 conv: grad_weight[o, c] = x[c] * grad_out[o]
        x = np.array([2.0, -3.0], dtype=np.float32).reshape(1, 2, 1, 1)
        w = rnd((3, 2, 1, 1), seed=5)
        g = np.array([1.0, 0.5, -1.0], dtype=np.float32).reshape(1, 3, 1, 1)
        _, gw, _ = ops.conv2d_backward(x, ConvParams(w), g)
        expected = np.outer(g.ravel(), x.ravel()).reshape(3, 2, 1, 1)
        np.testing.assert_allclose(gw, expected, rtol=1e-6)

    def test_shape_mismatch_raises(self):
        x = rnd((1, 2, 4, 4))
        w = rnd((2, 2, 3, 3))
        with pytest.raises(ConfigurationError):
            ops.conv2d_backward(x, ConvParams(w, padding=(1, 1)), rnd((1, 2, 3, 3)))


class TestRelu6:
    def test_clamp_values(self):
        x = np.array([7.0, -1.0, 3.5, 0.0, 6.0], dtype=np.float32).reshape(1, 1, 1, 5)
        y = ops.relu6(x)
        np.testing.assert_array_equal(y.ravel(), [6.0, 0.0, 3.5, 0.0, 6.0])

    def test_backward_gating(self):
        x = np.array([-1.0, 0.5, 7.0], dtype=np.float32).reshape(1, 1, 1, 3)
        g = np.ones_like(x)
        np.testing.assert_array_equal(ops.relu6_backward(x, g).ravel(), [0.0, 1.0, 0.0])


def bn_params(c, dtype=np.float32, **kw):
    return BatchNormParams(
        gamma=np.ones(c, dtype=dtype), beta=np.zeros(c, dtype=dtype),
        running_mean=np.zeros(c, dtype=dtype), running_var=np.ones(c, dtype=dtype), **kw
    )


class TestBatchNorm:
    def test_inference_identity_params(self):
        x = rnd((2, 3, 4, 4), seed=31)
        y, _ = ops.batch_norm(x, bn_params(3), training=False)
        np.testing.assert_allclose(y, x, atol=1e-4)

    def test_training_constant_channel_gives_beta(self):
        p = bn_params(2)
        p.beta[:] = [1.5, -0.5]
        x = np.full((2, 2, 3, 3), 7.0, dtype=np.float32)
        y, _ = ops.batch_norm(x, p, training=True)
        np.testing.assert_allclose(y[:, 0], 1.5, atol=1e-5)
        np.testing.assert_allclose(y[:, 1], -0.5, atol=1e-5)

    def test_training_statistics(self):
        p = bn_params(3)
        p.gamma[:] = [2.0, 1.0, 0.5]
        p.beta[:] = [0.0, 1.0, -1.0]
        x = rnd((2, 3, 4, 4), seed=32)
        y, _ = ops.batch_norm(x, p, training=True)
        y = y.astype(np.float64)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), p.beta, atol=1e-4)
        np.testing.assert_allclose(y.std(axis=(0, 2, 3)), p.gamma, atol=1e-4)

    def test_running_stats_update(self):
        p = bn_params(1, momentum=0.5)
        x = np.full((1, 1, 2, 2), 4.0, dtype=np.float32)
        ops.batch_norm(x, p, training=True)
        np.testing.assert_allclose(p.running_mean, [2.0])
        np.testing.assert_allclose(p.running_var, [0.5])

    def test_empty_batch_raises(self):
        x = np.zeros((0, 2, 2, 2), dtype=np.float32)
        with pytest.raises(ConfigurationError):
            ops.batch_norm(x, bn_params(2), training=True)


class TestBilinearResize:
    def test_same_size_identity(self):
        x = rnd((1, 2, 5, 6), seed=41)
        np.testing.assert_array_equal(ops.bilinear_resize(x, 5, 6), x)

    def test_constant_preserved(self):
        x = np.full((1, 1, 3, 4), 2.5, dtype=np.float32)
        y = ops.bilinear_resize(x, 7, 9)
        np.testing.assert_allclose(y, 2.5, rtol=1e-6)

    def test_2x2_to_4x4_matches_point_oracle(self):
        x = np.array([[1.0, 2.0], [3.0, 5.0]], dtype=np.float32)
        y = ops.bilinear_resize(x.reshape(1, 1, 2, 2), 4, 4)[0, 0]
        for i in range(4):
            for j in range(4):
                assert abs(y[i, j] - bilinear_point(x, i, j, 4, 4)) < 1e-5

    @pytest.mark.parametrize("align", [False, True])
    def test_random_matches_point_oracle(self, align):
        x = rnd((1, 1, 3, 5), seed=42)
        y = ops.bilinear_resize(x, 7, 4, align_corners=align)[0, 0]
        for i in range(7):
            for j in range(4):
                ref = bilinear_point(x[0, 0], i, j, 7, 4, align_corners=align)
                assert abs(y[i, j] - ref) < 1e-5


class TestChannelSoftmax:
    def test_two_equal_channels(self):
        x = np.zeros((1, 2, 1, 1), dtype=np.float32)
        y = ops.channel_softmax(x)
        np.testing.assert_allclose(y.ravel(), [0.5, 0.5])

    def test_sums_to_one(self):
        x = rnd((2, 48, 4, 5), seed=51)
        y = ops.channel_softmax(x)
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)

    def test_large_logits_no_overflow(self):
        x = np.array([1000.0, 0.0], dtype=np.float32).reshape(1, 2, 1, 1)
        y = ops.channel_softmax(x)
        np.testing.assert_allclose(y.ravel(), [1.0, 0.0], atol=1e-6)


class TestEwiseConcat:
    def test_add_mul_identities(self):
        x = rnd((1, 2, 3, 3), seed=61)
        np.testing.assert_array_equal(ops.ewise_add(x, np.zeros_like(x)), x)
        np.testing.assert_array_equal(ops.ewise_mul(x, np.ones_like(x)), x)
        assert np.all(ops.ewise_mul(x, np.zeros_like(x)) == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            ops.ewise_add(rnd((1, 2, 3, 3)), rnd((1, 2, 3, 4)))

    def test_concat_layout(self):
        a = rnd((1, 2, 3, 3), seed=62)
        b = rnd((1, 3, 3, 3), seed=63)
        y = ops.concat_channels([a, b])
        assert y.shape == (1, 5, 3, 3)
        np.testing.assert_array_equal(y[:, 2], b[:, 0])

    def test_concat_backward_splits(self):
        a = rnd((1, 2, 3, 3), seed=64)
        b = rnd((1, 3, 3, 3), seed=65)
        g = rnd((1, 5, 3, 3), seed=66)
        ga, gb = ops.concat_channels_backward([2, 3], g)
        np.testing.assert_array_equal(ga, g[:, :2])
        np.testing.assert_array_equal(gb, g[:, 2:])
