"""Kernel-level tests: shapes, frozen examples, and finite-difference checks.

Every backward pass is compared against central differences through a random
fixed linear functional of the kernel output, so all gradient paths are
exercised.
"""

import numpy as np
import pytest

from oaknet import tensor as T
from oaknet.metrics import grad_check

F64_TOL = 1e-6
F32_TOL = 1e-4


def loss_through(forward, backward, r):
    """Scalarise a kernel: L(x) = sum(r * f(x)), returning (L, dL/dx)."""
    def fn(x):
        y, cache = forward(x)
        grads = backward(r.astype(y.dtype), cache)
        g = grads[0] if isinstance(grads, tuple) else grads
        return float((y.astype(np.float64) * r).sum()), g
    return fn


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_paper_shape_200x300_stride2(self):
        x = np.zeros((1, 1, 200, 300), dtype=np.float32)
        w = np.zeros((32, 1, 11, 11), dtype=np.float32)
        y, _ = T.conv2d_forward(x, w, np.zeros(32, np.float32), stride=2, padding="same")
        assert y.shape == (1, 32, 100, 150)

    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 1, 256, 256)).astype(np.float32)
        w = np.zeros((32, 1, 3, 3), dtype=np.float32)
        y, _ = T.conv2d_forward(x, w, np.zeros(32, np.float32), stride=1, padding="same")
        assert y.shape == (1, 32, 256, 256)
        assert np.all(y == 0.0)

    def test_ones_valid_sums_window(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        y, _ = T.conv2d_forward(x, w, np.zeros(1), stride=1, padding="valid")
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 9.0

    def test_channel_mismatch_names_axis(self):
        x = np.zeros((1, 3, 8, 8))
        w = np.zeros((4, 2, 3, 3))
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv2d_forward(x, w, np.zeros(4))

    @pytest.mark.parametrize("size,k,stride", [(7, 3, 1), (8, 3, 2), (9, 5, 2),
                                               (10, 3, 3), (11, 7, 2), (5, 5, 4)])
    def test_same_padding_output_is_ceil(self, size, k, stride):
        x = np.random.default_rng(size).normal(size=(1, 1, size, size))
        w = np.random.default_rng(k).normal(size=(2, 1, k, k))
        y, _ = T.conv2d_forward(x, w, np.zeros(2), stride=stride, padding="same")
        assert y.shape[2] == -(-size // stride)
        assert y.shape[3] == -(-size // stride)

    def test_against_naive_convolution(self):
        # independent oracle: direct window loops over the padded input
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 9, 10))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        for stride, padding in [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")]:
            y, _ = T.conv2d_forward(x, w, b, stride=stride, padding=padding)
            assert np.allclose(y, naive_conv(x, w, b, stride, padding), atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_f64(self, seed):
        rng = np.random.default_rng(seed)
        stride = int(rng.integers(1, 3))
        padding = "same" if seed % 2 else "valid"
        x = rng.normal(size=(2, 2, 6, 7))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y, _ = T.conv2d_forward(x, w, b, stride=stride, padding=padding)
        r = rng.normal(size=y.shape)

        def fwd_x(v):
            return T.conv2d_forward(v, w, b, stride=stride, padding=padding)

        def fwd_w(v):
            return T.conv2d_forward(x, v, b, stride=stride, padding=padding)

        def fwd_b(v):
            return T.conv2d_forward(x, w, v, stride=stride, padding=padding)

        assert grad_check(loss_through(fwd_x, T.conv2d_backward, r), x).max_rel_error < F64_TOL
        assert grad_check(
            lambda v: _wb_loss(fwd_w, r, pick=1)(v), w).max_rel_error < F64_TOL
        assert grad_check(
            lambda v: _wb_loss(fwd_b, r, pick=2)(v), b).max_rel_error < F64_TOL

    def test_gradients_f32(self):
        # float32 backward vs float64 finite differences (see gradsuite)
        from oaknet.gradsuite import check_conv2d
        worst = max(check_conv2d(seed, np.float32) for seed in range(20))
        assert worst < F32_TOL


def _wb_loss(forward, r, pick):
    """Loss wrapper whose gradient is taken w.r.t. weights (pick=1) or bias."""
    def fn(v):
        y, cache = forward(v)
        grads = T.conv2d_backward(r.astype(y.dtype), cache)
        return float((y.astype(np.float64) * r).sum()), grads[pick]
    return fn


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-wd // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - wd, 0)
        xp = np.pad(x, ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    else:
        oh = (h - kh) // stride + 1
        ow = (wd - kw) // stride + 1
        xp = x
    y = np.zeros((n, k, oh, ow))
    for ni in range(n):
        for ki in range(k):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    y[ni, ki, i, j] = (patch * w[ki]).sum() + b[ki]
    return y


# ---------------------------------------------------------------------------
# maxpool2d
# ---------------------------------------------------------------------------

class TestMaxPool:
    def test_paper_shape_100x150(self):
        x = np.zeros((1, 32, 100, 150), dtype=np.float32)
        y, _ = T.maxpool2d_forward(x, (3, 3), 2)
        assert y.shape == (1, 32, 49, 74)

    def test_constant_input_first_index_tiebreak(self):
        x = np.full((1, 1, 4, 4), 3.0)
        y, cache = T.maxpool2d_forward(x, (2, 2), 2)
        assert np.all(y == 3.0)
        dy = np.ones_like(y)
        dx = T.maxpool2d_backward(dy, cache)
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, ::2, ::2] = 1.0  # whole gradient to the first element
        assert np.array_equal(dx, expected)

    def test_enumerated_windows(self):
        # [DERIVED] exhaustive window scan: 0..15 pooled 2x2 stride 2
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        y, _ = T.maxpool2d_forward(x, (2, 2), 2)
        assert np.array_equal(y[0, 0], [[5, 7], [13, 15]])

    def test_window_larger_than_input(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2d_forward(np.zeros((1, 1, 2, 2)), (3, 3), 1)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_window_scan_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 2, 7, 8))
        for k, s in [((2, 2), 2), ((3, 3), 2), ((3, 3), 3)]:
            y, _ = T.maxpool2d_forward(x, k, s)
            oh = (7 - k[0]) // s + 1
            ow = (8 - k[1]) // s + 1
            for ni in range(2):
                for ci in range(2):
                    for i in range(oh):
                        for j in range(ow):
                            win = x[ni, ci, i * s:i * s + k[0], j * s:j * s + k[1]]
                            assert y[ni, ci, i, j] == win.max()

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_f64(self, seed):
        rng = np.random.default_rng(seed)
        # distinct values keep the argmax stable under the probe epsilon
        x = rng.permutation(np.arange(2 * 2 * 6 * 6, dtype=np.float64)).reshape(2, 2, 6, 6)
        y, _ = T.maxpool2d_forward(x, (3, 3), 2)
        r = rng.normal(size=y.shape)
        res = grad_check(loss_through(lambda v: T.maxpool2d_forward(v, (3, 3), 2),
                                      T.maxpool2d_backward, r), x, eps=1e-3)
        assert res.max_rel_error < F64_TOL


# ---------------------------------------------------------------------------
# upsample
# ---------------------------------------------------------------------------

class TestUpsample:
    def test_factor8_roundtrip_shape(self):
        x = np.zeros((1, 1, 32, 32), dtype=np.float32)
        y, _ = T.upsample_nearest_forward(x, 8)
        assert y.shape == (1, 1, 256, 256)

    def test_factor1_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
        y, _ = T.upsample_nearest_forward(x, 1)
        assert np.array_equal(y, x)

    def test_block_replication(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y, _ = T.upsample_nearest_forward(x, 2)
        assert np.array_equal(y[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2],
                                        [3, 3, 4, 4], [3, 3, 4, 4]])

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_mass_conserved(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 2, 4, 5))
        f = int(rng.integers(1, 5))
        y, cache = T.upsample_nearest_forward(x, f)
        dy = rng.normal(size=y.shape)
        dx = T.upsample_nearest_backward(dy, cache)
        assert dx.shape == x.shape
        assert np.isclose(dx.sum(), dy.sum())
        res = grad_check(loss_through(lambda v: T.upsample_nearest_forward(v, f),
                                      T.upsample_nearest_backward, dy), x)
        assert res.max_rel_error < F64_TOL


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

class TestDense:
    def test_paper_flatten_to_1024(self):
        x = np.zeros((1, 128 * 5 * 8), dtype=np.float32)
        w = np.zeros((5120, 1024), dtype=np.float32)
        y, _ = T.dense_forward(x, w, np.zeros(1024, np.float32))
        assert y.shape == (1, 1024)

    def test_identity_passthrough(self):
        x = np.random.default_rng(1).normal(size=(3, 4))
        y, _ = T.dense_forward(x, np.eye(4), np.zeros(4))
        assert np.allclose(y, x)

    def test_dimension_mismatch(self):
        with pytest.raises(T.ShapeError, match="features"):
            T.dense_forward(np.zeros((2, 5)), np.zeros((4, 3)), np.zeros(3))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_f64(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=4)
        r = rng.normal(size=(4, 4))

        def fn_w(v):
            y, cache = T.dense_forward(x, v, b)
            _, dw, _ = T.dense_backward(r, cache)
            return float((y * r).sum()), dw

        assert grad_check(fn_w, w).max_rel_error < F64_TOL
        assert grad_check(loss_through(lambda v: T.dense_forward(v, w, b),
                                       T.dense_backward, r), x).max_rel_error < F64_TOL


# ---------------------------------------------------------------------------
# batchnorm
# ---------------------------------------------------------------------------

class TestBatchNorm:
    def test_normalized_input_passes_through(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 3, 16, 16))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        y, _ = T.batchnorm_forward(x, np.ones(3), np.zeros(3),
                                   np.zeros(3), np.ones(3), training=True)
        assert np.allclose(y, x, atol=1e-4)

    def test_zero_gamma_collapses_to_beta(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 2, 5, 5))
        beta = np.array([1.5, -2.0])
        y, _ = T.batchnorm_forward(x, np.zeros(2), beta,
                                   np.zeros(2), np.ones(2), training=True)
        assert np.allclose(y, beta.reshape(1, 2, 1, 1) * np.ones_like(x))

    def test_single_element_raises(self):
        with pytest.raises(T.DegenerateVarianceError):
            T.batchnorm_forward(np.zeros((1, 3, 1, 1)), np.ones(3), np.zeros(3),
                                np.zeros(3), np.ones(3), training=True)

    def test_running_stats_update(self):
        rng = np.random.default_rng(2)
        x = rng.normal(loc=5.0, size=(16, 2, 8, 8))
        rm = np.zeros(2)
        rv = np.ones(2)
        T.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv,
                            momentum=0.9, training=True)
        assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_gradient_f64_2x3x4x4(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 4, 4))
        gamma = rng.normal(size=3)
        beta = rng.normal(size=3)
        r = rng.normal(size=x.shape)

        def fwd(v):
            return T.batchnorm_forward(v, gamma, beta, np.zeros(3), np.ones(3),
                                       training=True)

        res = grad_check(loss_through(fwd, lambda dy, c: T.batchnorm_backward(dy, c), r), x)
        assert res.max_rel_error < 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_all_params(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 2, 4, 4))
        gamma = rng.normal(size=2) + 1.5
        beta = rng.normal(size=2)
        r = rng.normal(size=x.shape)

        def fn_gamma(v):
            y, cache = T.batchnorm_forward(x, v, beta, np.zeros(2), np.ones(2),
                                           training=True)
            _, dg, _ = T.batchnorm_backward(r, cache)
            return float((y * r).sum()), dg

        def fn_x(v):
            y, cache = T.batchnorm_forward(v, gamma, beta, np.zeros(2), np.ones(2),
                                           training=True)
            dx, _, _ = T.batchnorm_backward(r, cache)
            return float((y * r).sum()), dx

        assert grad_check(fn_gamma, gamma).max_rel_error < F64_TOL
        assert grad_check(fn_x, x).max_rel_error < 1e-5


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class TestActivations:
    def test_softmax_uniform(self):
        p, _ = T.softmax_forward(np.zeros((1, 5)), axis=1)
        assert np.allclose(p, 0.2)

    def test_relu_definition(self):
        y, _ = T.relu_forward(np.array([-1.0, 0.0, 2.0]))
        assert np.array_equal(y, [0.0, 0.0, 2.0])

    def test_softmax_large_logits_stable(self):
        p, _ = T.softmax_forward(np.array([[1000.0, 1000.0]]), axis=1)
        assert np.allclose(p, 0.5)
        assert np.isfinite(p).all()

    @pytest.mark.parametrize("seed", range(20))
    def test_softmax_is_probability_vector(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=10.0, size=(6, 5))
        p, _ = T.softmax_forward(x, axis=1)
        assert (p >= 0).all()
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-6

    def test_sigmoid_extremes_finite(self):
        y, _ = T.sigmoid_forward(np.array([-500.0, 0.0, 500.0]))
        assert np.isfinite(y).all()
        assert np.allclose(y, [0.0, 0.5, 1.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_f64(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 5))
        r = rng.normal(size=(3, 5))
        for fwd, bwd in [(T.sigmoid_forward, T.sigmoid_backward),
                         (lambda v: T.softmax_forward(v, axis=1), T.softmax_backward)]:
            res = grad_check(loss_through(fwd, bwd, r), x)
            assert res.max_rel_error < F64_TOL
        # relu away from the kink
        x_off = x + np.where(np.abs(x) < 0.1, 0.2 * np.sign(x + 0.01), 0.0)
        res = grad_check(loss_through(T.relu_forward, T.relu_backward, r), x_off, eps=1e-6)
        assert res.max_rel_error < F64_TOL


class TestDropout:
    def test_inference_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        y, _ = T.dropout_forward(x, 0.5, np.random.default_rng(1), training=False)
        assert np.array_equal(y, x)

    def test_inverted_scaling_preserves_expectation(self):
        x = np.ones((200, 200))
        y, _ = T.dropout_forward(x, 0.25, np.random.default_rng(3), training=True)
        kept = y > 0
        assert np.allclose(y[kept], 1.0 / 0.75)
        assert abs(kept.mean() - 0.75) < 0.02


class TestDeterminism:
    def test_kernels_bit_identical(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 12, 12)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        y1, _ = T.conv2d_forward(x, w, b, stride=2, padding="same")
        y2, _ = T.conv2d_forward(x.copy(), w.copy(), b.copy(), stride=2, padding="same")
        assert np.array_equal(y1, y2)
        p1, _ = T.maxpool2d_forward(y1, (3, 3), 2)
        p2, _ = T.maxpool2d_forward(y2, (3, 3), 2)
        assert np.array_equal(p1, p2)

    def test_dtype_preserved(self):
        for dt in (np.float32, np.float64):
            x = np.ones((1, 1, 4, 4), dtype=dt)
            w = np.ones((1, 1, 3, 3), dtype=dt)
            y, _ = T.conv2d_forward(x, w, np.zeros(1, dtype=dt))
            assert y.dtype == dt
