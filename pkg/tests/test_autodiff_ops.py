"""Forward-value tests for the engine ops against direct-definition oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardioseg.autodiff import (
    Tape, Tensor, backward, clamp, concat_channels, conv2d, dense,
    dump_tensor, global_avg_pool, log, maxpool2d, relu, select_channel,
    sigmoid, softmax_channels, take_batch, upsample2x_nearest,
)
from cardioseg.errors import ShapeError


def conv2d_oracle(x, w, b, stride=1, dilation=1, padding=0):
    """Direct nested-sum definition of the dilated cross-correlation."""
    bs, cin, h, wi = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wi + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((bs, cout, ho, wo), dtype=np.float64)
    for n in range(bs):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += (w[o, c, p, q]
                                        * xp[n, c, i * stride + p * dilation,
                                             j * stride + q * dilation])
                    out[n, o, i, j] = acc + b[o]
    return out


def maxpool_oracle(x):
    bs, c, h, w = x.shape
    out = np.zeros((bs, c, h // 2, w // 2), dtype=x.dtype)
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


def matmul_oracle(x, w, b):
    bs, f = x.shape
    o = w.shape[1]
    out = np.zeros((bs, o), dtype=np.float64)
    for n in range(bs):
        for k in range(o):
            acc = 0.0
            for i in range(f):
                acc += x[n, i] * w[i, k]
            out[n, k] = acc + b[k]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_dilated_impulse_response(self):
        x = np.zeros((1, 1, 5, 5), dtype=np.float32)
        x[0, 0, 2, 2] = 1.0
        k = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1, np.float32)),
                     dilation=2, padding=2)
        # kernel values land at offsets {-2,0,+2}^2 around the impulse,
        # flipped by the correlation geometry
        expected = np.zeros((5, 5), dtype=np.float32)
        for p in range(3):
            for q in range(3):
                expected[2 - 2 * (p - 1), 2 - 2 * (q - 1)] = k[0, 0, p, q]
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_against_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, dilation=1,
                     padding=1)
        ref = conv2d_oracle(x, w, b, padding=1)
        np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("dilation", [1, 2, 4])
    @pytest.mark.parametrize("padding", [0, 1, 2])
    def test_all_geometry_combos(self, stride, dilation, padding):
        rng = np.random.default_rng(stride * 100 + dilation * 10 + padding)
        h = w = 11
        if dilation * 2 + 1 > h + 2 * padding:
            pytest.skip("kernel larger than padded input")
        x = rng.standard_normal((2, 2, h, w)).astype(np.float32)
        wt = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride,
                     dilation=dilation, padding=padding)
        ref = conv2d_oracle(x, wt, b, stride, dilation, padding)
        assert out.data.shape == ref.shape
        np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-5)

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 3, 4, 4), np.float32))
        w = Tensor(np.zeros((2, 4, 3, 3), np.float32))
        b = Tensor(np.zeros(2, np.float32))
        with pytest.raises(ShapeError, match=r"Cin=3.*Cin=4"):
            conv2d(x, w, b, padding=1)

    def test_kernel_larger_than_input_rejected(self):
        x = Tensor(np.zeros((1, 1, 3, 3), np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3), np.float32))
        b = Tensor(np.zeros(1, np.float32))
        with pytest.raises(ShapeError, match="effective kernel"):
            conv2d(x, w, b, dilation=2)  # extent 5 > 3, no padding

    def test_forward_bit_identical_across_runs(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        r1 = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        r2 = conv2d(Tensor(x.copy()), Tensor(w.copy()), Tensor(b.copy()),
                    padding=1).data
        assert np.array_equal(r1, r2)


class TestMaxpool:
    def test_tiny(self):
        x = Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2))
        assert maxpool2d(x).data.reshape(()) == 4.0

    def test_constant_input_routes_top_left(self):
        x = Tensor(np.full((1, 1, 4, 4), 2.5, np.float32), requires_grad=True)
        with Tape():
            out = maxpool2d(x)
            backward(out.sum())
        expected = np.zeros((4, 4), np.float32)
        expected[::2, ::2] = 1.0  # first occurrence in row-major window order
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    def test_against_window_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 1, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(maxpool2d(Tensor(x)).data, maxpool_oracle(x))

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2d(Tensor(np.zeros((1, 1, 5, 4), np.float32)))


class TestUpsample:
    def test_replication(self):
        x = Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2))
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
                            np.float32)
        np.testing.assert_array_equal(upsample2x_nearest(x).data[0, 0], expected)

    def test_zeros(self):
        out = upsample2x_nearest(Tensor(np.zeros((2, 3, 4, 4), np.float32)))
        assert out.shape == (2, 3, 8, 8)
        assert not out.data.any()

    def test_backward_block_sum(self):
        x = Tensor(np.zeros((1, 1, 3, 3), np.float32), requires_grad=True)
        with Tape():
            backward(upsample2x_nearest(x).sum())
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 3, 3), 4.0, np.float32))


class TestElementwise:
    def test_relu_values(self):
        out = relu(Tensor(np.array([-1.0, 2.0], np.float32)))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.array([0.0], np.float32))).data[0] == 0.5

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(np.array([0.0], np.float64), requires_grad=True)
        with Tape():
            backward(sigmoid(x).sum())
        np.testing.assert_allclose(x.grad, [0.25])

    def test_sigmoid_stable_for_large_inputs(self):
        x = Tensor(np.array([-1e4, 1e4], np.float64))
        out = sigmoid(x).data
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)
        assert np.all(np.isfinite(out))


class TestSoftmax:
    def test_two_equal_logits(self):
        x = Tensor(np.zeros((1, 2, 1, 1), np.float32))
        np.testing.assert_allclose(softmax_channels(x).data.ravel(), [0.5, 0.5])

    def test_closed_form(self):
        x = np.zeros((1, 2, 1, 1), np.float64)
        x[0, 1] = np.log(3.0)
        np.testing.assert_allclose(softmax_channels(Tensor(x)).data.ravel(),
                                   [0.25, 0.75], rtol=1e-12)

    @given(shift=st.floats(-50, 50), seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance(self, shift, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 4, 3, 3))
        a = softmax_channels(Tensor(x)).data
        b = softmax_channels(Tensor(x + shift)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_channel_sums_one(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32) * 10
        s = softmax_channels(Tensor(x)).data.sum(axis=1)
        np.testing.assert_allclose(s, 1.0, atol=1e-6)


class TestConcat:
    def test_shape_arithmetic(self):
        a = Tensor(np.zeros((2, 1, 4, 4), np.float32))
        b = Tensor(np.zeros((2, 4, 4, 4), np.float32))
        assert concat_channels(a, b).shape == (2, 5, 4, 4)

    def test_first_channel_preserved(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
        b = Tensor(rng.standard_normal((2, 3, 3, 3)).astype(np.float32))
        out = concat_channels(a, b)
        np.testing.assert_array_equal(out.data[:, 0], a.data[:, 0])
        np.testing.assert_array_equal(out.data[:, 2:], b.data)

    def test_gradient_roundtrip_bit_exact(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        up = rng.standard_normal((2, 5, 3, 3))
        with Tape():
            out = concat_channels(a, b)
            backward((out * Tensor(up)).sum())
        np.testing.assert_array_equal(a.grad, up[:, :2])
        np.testing.assert_array_equal(b.grad, up[:, 2:])

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.zeros((1, 1, 4, 4), np.float32)),
                            Tensor(np.zeros((1, 1, 5, 4), np.float32)))


class TestArithmeticAndReductions:
    def test_add_zero(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 4)).astype(np.float32)
        out = Tensor(a) + Tensor(np.zeros_like(a))
        np.testing.assert_array_equal(out.data, a)

    def test_add_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(3, np.float32)) + Tensor(np.zeros(4, np.float32))

    def test_mean_value_and_gradient(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]), requires_grad=True)
        with Tape():
            m = x.mean()
            backward(m)
        assert m.item() == 2.5
        np.testing.assert_array_equal(x.grad, np.full(4, 0.25))

    def test_sum_gradient_is_ones(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        with Tape():
            backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_clamp_and_log(self):
        x = Tensor(np.array([1e-12, 0.5, 2.0]))
        out = log(clamp(x, 1e-7, 1.0))
        np.testing.assert_allclose(out.data, [np.log(1e-7), np.log(0.5), 0.0])

    def test_select_channel_and_take_batch(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 3, 2, 2))
        t = Tensor(x)
        np.testing.assert_array_equal(select_channel(t, 1).data, x[:, 1])
        np.testing.assert_array_equal(take_batch(t, [2, 0]).data, x[[2, 0]])

    def test_global_avg_pool(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, [[7.5]])


class TestDense:
    def test_identity(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        out = dense(Tensor(x), Tensor(np.eye(3, dtype=np.float32)),
                    Tensor(np.zeros(3, np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_tiny_closed_form(self):
        x = Tensor(np.array([[1.0, 2.0]], np.float32))
        w = Tensor(np.array([[1.0], [1.0]], np.float32))
        b = Tensor(np.zeros(1, np.float32))
        assert dense(x, w, b).data[0, 0] == 3.0

    def test_against_matmul_oracle(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 7))
        w = rng.standard_normal((7, 3))
        b = rng.standard_normal(3)
        out = dense(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(x, w, b), rtol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            dense(Tensor(np.zeros((1, 3), np.float32)),
                  Tensor(np.zeros((4, 2), np.float32)),
                  Tensor(np.zeros(2, np.float32)))


def test_dump_tensor(tmp_path):
    t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    path = tmp_path / "t.raw"
    dump_tensor(t, path)
    raw = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(2, 3)
    np.testing.assert_array_equal(raw, t.data)
    assert (tmp_path / "t.raw.hdr").read_text() == "shape=2,3 dtype=float32\n"
