import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aunet.tensor import (
    GradientCheckError,
    Tensor,
    concat,
    conv2d,
    crop,
    gather_windows,
    grad_check,
    max_pool2d,
    read_tensor,
    upsample_nearest,
    write_tensor,
)

SEEDS = list(range(20))


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestForwardValues:
    def test_conv_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = Tensor(rand(rng, 1, 1, 4, 5))
        w = Tensor(np.ones((1, 1, 1, 1)))
        y = conv2d(x, w, stride=1, padding=0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_conv_all_ones_3x3(self):
        # hand summation: nine ones times ones kernel
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = conv2d(x, w)
        assert y.data.shape == (1, 1, 1, 1)
        assert y.item() == 9.0

    def test_conv_shape_512x14x14(self):
        # 512 filters, 3x3, pad 1, stride 1 preserves the 14x14 grid
        x = Tensor(np.zeros((1, 512, 14, 14)))
        w = Tensor(np.zeros((512, 512, 3, 3)))
        y = conv2d(x, w, stride=1, padding=1)
        assert y.data.shape == (1, 512, 14, 14)

    def test_conv_channel_mismatch(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        w = Tensor(np.zeros((4, 4, 3, 3)))
        with pytest.raises(ValueError, match="channel"):
            conv2d(x, w)

    def test_conv_kernel_too_large(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ValueError, match="fit"):
            conv2d(x, w)

    def test_upsample_tiles(self):
        x = Tensor(np.arange(9.0).reshape(1, 3, 3))
        y = upsample_nearest(x, 2)
        assert y.data.shape == (1, 6, 6)
        for r in range(3):
            for c in range(3):
                tile = y.data[0, 2 * r:2 * r + 2, 2 * c:2 * c + 2]
                np.testing.assert_array_equal(tile, np.full((2, 2), x.data[0, r, c]))

    def test_upsample_scalar_cell(self):
        y = upsample_nearest(Tensor([[5.0]]), 2)
        np.testing.assert_array_equal(y.data, np.full((2, 2), 5.0))

    def test_upsample_factor_zero_rejected(self):
        with pytest.raises(ValueError):
            upsample_nearest(Tensor(np.zeros((2, 2))), 0)

    def test_upsample_backward_accumulates(self):
        x = Tensor(rand(np.random.default_rng(1), 3, 3), requires_grad=True)
        upsample_nearest(x, 2).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((3, 3), 4.0))

    def test_sigmoid_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        y = x.sigmoid()
        assert y.item() == 0.5
        y.backward()
        assert x.grad == 0.25


class TestBackwardBasics:
    def test_sum_grad_is_ones(self):
        x = Tensor(rand(np.random.default_rng(2), 4, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((4, 3)))

    def test_fanout_accumulates(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        y = x + x
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.full(2, 2.0))

    def test_backward_rejects_nonscalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_scale_and_div(self):
        x = Tensor([2.0, 4.0], requires_grad=True)
        ((x / 2.0) * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, np.full(2, 1.5))

    def test_broadcast_bias_add(self):
        x = Tensor(rand(np.random.default_rng(3), 5, 4), requires_grad=True)
        b = Tensor(rand(np.random.default_rng(4), 4), requires_grad=True)
        (x + b).sum().backward()
        np.testing.assert_array_equal(b.grad, np.full(4, 5.0))
        np.testing.assert_array_equal(x.grad, np.ones((5, 4)))

    def test_deterministic_forward_backward(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rand(rng, 2, 3, 8, 8), requires_grad=True)
            w = Tensor(rand(rng, 4, 3, 3, 3), requires_grad=True)
            y = conv2d(x, w, padding=1).relu()
            y = max_pool2d(y, 2)
            loss = (y * y).sum()
            loss.backward()
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)


class TestGradCheck:
    def test_linear_map_exact(self):
        err = grad_check(lambda x: (x * 3.0).sum(), [np.array([1.7, -0.4])], eps=1e-4)
        assert err < 1e-8

    def test_constant_closure(self):
        err = grad_check(lambda x: (x * 0.0).sum() + Tensor(1.0), [np.array([2.0])])
        assert err == 0.0

    def test_eps_validated(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: x.sum(), [np.ones(2)], eps=0.5)

    def test_nonfinite_reported_with_coordinate(self):
        def bad(x):
            return x.log().sum()

        with np.errstate(divide="ignore"):
            with pytest.raises(GradientCheckError, match="coordinate"):
                grad_check(bad, [np.array([1.0, 0.0])])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, 2, 3, 6, 6)
        w = rand(rng, 4, 3, 3, 3)
        err = grad_check(lambda a, b: conv2d(a, b, stride=1, padding=1).sum(), [x, w])
        assert err < 1e-4

    @pytest.mark.parametrize("seed", SEEDS[:5])
    def test_conv2d_strided(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rand(rng, 1, 2, 7, 7)
        w = rand(rng, 3, 2, 3, 3)
        err = grad_check(lambda a, b: (conv2d(a, b, stride=2, padding=0) * 0.5).sum(), [x, w])
        assert err < 1e-4

    def test_conv_matches_finite_differences_on_5x5(self):
        rng = np.random.default_rng(11)
        x = rand(rng, 1, 1, 5, 5)
        w = rand(rng, 2, 1, 3, 3)
        err = grad_check(lambda a, b: conv2d(a, b).sum(), [x, w], eps=1e-4)
        assert err < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_pointwise_ops(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = rand(rng, 3, 4)

        def f(a):
            return (a.relu() + a.sigmoid() * a.tanh()).sum()

        assert grad_check(f, [x]) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_and_mean(self, seed):
        rng = np.random.default_rng(300 + seed)
        a = rand(rng, 3, 4)
        b = rand(rng, 4, 2)
        assert grad_check(lambda x, y: (x @ y).mean(), [a, b]) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat_slice_transpose(self, seed):
        rng = np.random.default_rng(400 + seed)
        a = rand(rng, 2, 3)
        b = rand(rng, 2, 2)

        def f(x, y):
            z = concat([x, y.T @ Tensor(np.ones((2, 3)))], axis=0)
            return (z[1:3, :2] * z[0:2, 1:3]).sum()

        assert grad_check(f, [a, b]) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_pool_upsample_crop(self, seed):
        rng = np.random.default_rng(500 + seed)
        x = rand(rng, 1, 2, 6, 6)

        def f(a):
            y = max_pool2d(a, 2)
            y = upsample_nearest(y, 2)
            return crop(y, (1, 4), (0, 3)).sum()

        assert grad_check(f, [x]) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gather_windows(self, seed):
        rng = np.random.default_rng(600 + seed)
        x = rand(rng, 3, 2, 5, 5)
        r0 = rng.integers(0, 3, size=3)
        c0 = rng.integers(0, 3, size=3)

        def f(a):
            return (gather_windows(a, r0, c0, 3) * 2.0).sum()

        assert grad_check(f, [x]) < 1e-4

    def test_log_loss_composite(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0.05, 0.95, size=(4, 3))
        lab = rng.integers(0, 2, size=(4, 3)).astype(float)

        def f(x):
            pos = (x + 0.05) * (1 / 1.05)
            neg = (1.05 - x) * (1 / 1.05)
            return -(Tensor(lab) * pos.log() + Tensor(1.0 - lab) * neg.log()).sum()

        assert grad_check(f, [p]) < 1e-4


class TestShapeProperties:
    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(3, 12), w=st.integers(3, 12), k=st.integers(1, 3),
           stride=st.integers(1, 3), pad=st.integers(0, 2))
    def test_conv_output_shape_closed_form(self, h, w, k, stride, pad):
        if h + 2 * pad < k or w + 2 * pad < k:
            return
        x = Tensor(np.zeros((1, 2, h, w)))
        f = Tensor(np.zeros((3, 2, k, k)))
        y = conv2d(x, f, stride=stride, padding=pad)
        assert y.data.shape == (1, 3, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(1, 8), w=st.integers(1, 8), f=st.integers(1, 4))
    def test_upsample_shape(self, h, w, f):
        y = upsample_nearest(Tensor(np.zeros((2, h, w))), f)
        assert y.data.shape == (2, h * f, w * f)

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(3, 10), w=st.integers(3, 10), data=st.data())
    def test_crop_shape(self, h, w, data):
        r0 = data.draw(st.integers(0, h - 1))
        r1 = data.draw(st.integers(r0, h - 1))
        c0 = data.draw(st.integers(0, w - 1))
        c1 = data.draw(st.integers(c0, w - 1))
        y = crop(Tensor(np.zeros((h, w))), (r0, r1), (c0, c1))
        assert y.data.shape == (r1 - r0 + 1, c1 - c0 + 1)


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(42)
        arr = rand(rng, 3, 4, 2)
        buf = io.BytesIO()
        write_tensor(buf, arr)
        buf.seek(0)
        back = read_tensor(buf)
        np.testing.assert_array_equal(back, arr)
        assert back.dtype == np.float64

    def test_scalar_round_trip(self):
        buf = io.BytesIO()
        write_tensor(buf, np.array(3.5))
        buf.seek(0)
        assert read_tensor(buf) == 3.5

    def test_bad_magic(self):
        buf = io.BytesIO(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            read_tensor(buf)

    def test_layout_is_little_endian_f8(self):
        buf = io.BytesIO()
        write_tensor(buf, np.array([1.0, 2.0]))
        raw = buf.getvalue()
        assert raw[:4] == b"AUT1"
        assert raw[4:8] == (1).to_bytes(4, "little")
        assert raw[8:16] == (2).to_bytes(8, "little")
        assert np.frombuffer(raw[16:], dtype="<f8").tolist() == [1.0, 2.0]
