import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terdnet import tensor as T
from terdnet.gradcheck import check_function, numeric_grad, rel_error
from terdnet.tensor import ShapeError, Tape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv_reference(x, w, b, stride, pad):
    """Direct six-loop convolution."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_constant_field(self):
        c, cin = 0.7, 4
        x = np.full((1, cin, 6, 6), c)
        out = T.conv2d(Tensor(x), Tensor(np.ones((2, cin, 3, 3))), Tensor(np.zeros(2)), 1, 1)
        np.testing.assert_allclose(out.data[:, :, 1:-1, 1:-1], 9 * cin * c, rtol=1e-12)

    @pytest.mark.parametrize("stride,pad,size", [(1, 1, 5), (2, 1, 6), (2, 0, 7), (1, 0, 4)])
    def test_matches_loops(self, rng, stride, pad, size):
        x = rng.standard_normal((2, 3, size, size))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, conv_reference(x, w, b, stride, pad), rtol=1e-10, atol=1e-12)
        assert out.shape[2] == (size + 2 * pad - 3) // stride + 1

    def test_gradients_vs_finite_differences(self, rng):
        row = check_function(
            "conv2d", lambda x, w, b: T.conv2d(x, w, b, 1, 1),
            [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)],
            eps=1e-3,
        )
        assert row.max_rel_error < 1e-3

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 1, 3, 6, 6))
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        a, b = 1.7, -0.4
        lhs = T.conv2d(Tensor(a * x + b * y), w, None, 1, 1).data
        rhs = a * T.conv2d(Tensor(x), w, None, 1, 1).data + b * T.conv2d(Tensor(y), w, None, 1, 1).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="input channels"):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


class TestPointwise:
    def test_exact_values(self):
        zero = Tensor(np.zeros((1, 1, 1, 1)))
        assert T.sigmoid(zero).data.item() == 0.5
        assert T.tanh(zero).data.item() == 0.0
        sm = T.softmax_channels(Tensor(np.zeros((1, 2, 3, 3))))
        assert np.all(sm.data == 0.5)

    def test_ranges_on_extreme_input(self):
        x = Tensor(np.array([-800.0, -5.0, 0.0, 5.0, 800.0]).reshape(1, 1, 1, 5))
        s = T.sigmoid(x).data
        assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
        t = T.tanh(x).data
        assert np.all((t >= -1) & (t <= 1))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_softmax_sums_to_one(self, seed, channels):
        x = np.random.default_rng(seed).standard_normal((2, channels, 3, 3)) * 20
        s = T.softmax_channels(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.softmax_channels])
    def test_gradients(self, rng, op):
        assert check_function(op.__name__, op, [rng.standard_normal((1, 3, 3, 3)) * 2]).passed


class TestBilinearResize:
    def test_constant_field(self):
        out = T.bilinear_resize(Tensor(np.full((1, 2, 3, 3), 4.25)), 7, 5)
        np.testing.assert_allclose(out.data, 4.25, rtol=0, atol=1e-14)

    def test_align_corners_row(self):
        x = Tensor(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]))
        out = T.bilinear_resize(x, 2, 4)
        # corner-aligned sample positions 0, 1/3, 2/3, 1 along the row
        np.testing.assert_allclose(out.data[0, 0], [[0, 1 / 3, 2 / 3, 1]] * 2, rtol=0, atol=1e-15)

    def test_identity_size(self, rng):
        x = rng.standard_normal((1, 2, 4, 5))
        np.testing.assert_array_equal(T.bilinear_resize(Tensor(x), 4, 5).data, x)

    def test_corners_preserved(self, rng):
        x = rng.standard_normal((1, 1, 3, 4))
        out = T.bilinear_resize(Tensor(x), 9, 11).data[0, 0]
        np.testing.assert_allclose([out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]],
                                   [x[0, 0, 0, 0], x[0, 0, 0, -1], x[0, 0, -1, 0], x[0, 0, -1, -1]], atol=1e-14)

    def test_gradient(self, rng):
        assert check_function("resize", lambda x: T.bilinear_resize(x, 6, 3), [rng.standard_normal((1, 2, 3, 4))]).passed


class TestStructural:
    def test_concat_channels(self, rng):
        a, b = rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((1, 5, 2, 2))
        out = T.concat_channels([Tensor(a), Tensor(b)])
        assert out.shape == (1, 8, 2, 2)

    def test_concat_gradient_routes_slices(self, rng):
        a, b = Tensor(rng.standard_normal((1, 3, 2, 2)), True), Tensor(rng.standard_normal((1, 5, 2, 2)), True)
        up = rng.standard_normal((1, 8, 2, 2))
        with Tape() as tape:
            loss = T.sum_all(T.mul(T.concat_channels([a, b]), up))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[a], up[:, :3])
        np.testing.assert_array_equal(grads[b], up[:, 3:])
        row = check_function("concat", lambda x, y: T.concat_channels([x, y]), [a.data, b.data])
        assert row.passed

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])

    def test_hadamard_identity(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(T.mul(Tensor(x), Tensor(np.ones_like(x))).data, x)

    def test_elementwise_shape_error(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 3))))


class TestTape:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        np.testing.assert_array_equal(tape.backward(loss)[x], np.ones(x.shape))

    def test_half_square_gradient_is_x(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = T.mul(T.sum_all(T.mul(x, x)), 0.5)
        np.testing.assert_allclose(tape.backward(loss)[x], x.data, rtol=1e-15)

    def test_second_backward_accumulates(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(x, 3.0))
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(x.shape, 6.0))
        x.zero_grad()
        assert x.grad is None

    def test_unused_parameter_gets_exact_zero(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        unused = Tensor(rng.standard_normal((3,)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        grads = tape.backward(loss, [x, unused])
        assert np.all(grads[unused] == 0.0)

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, 2.0)
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(y)

    def test_each_record_visited_once_in_reverse(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            a = T.tanh(x)
            b = T.mul(a, a)
            loss = T.sum_all(T.add(b, a))
        seen = []
        for rec in tape.records:
            orig = rec.backward

            def wrapped(g, orig=orig, op=rec.op):
                seen.append(op)
                return orig(g)

            rec.backward = wrapped
        tape.backward(loss)
        assert seen == [r.op for r in reversed(tape.records)]

    def test_no_recording_without_tape(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        y = T.tanh(x)
        assert y._tape is None and not y.requires_grad

    def test_reused_weight_accumulates_over_steps(self, rng):
        # a kernel applied three times gets the sum of per-use gradients
        w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        h0 = rng.standard_normal((1, 2, 3, 3))

        def f(wt):
            h = Tensor(h0)
            for _ in range(3):
                h = T.tanh(T.conv2d(h, wt, None, 1, 1))
            return h

        assert check_function("recurrent conv", f, [w.data]).passed


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float((x ** 2).sum()), x, 1e-5)
    np.testing.assert_allclose(g, 2 * np.array([1.0, -2.0, 3.0]), rtol=1e-8)
    assert rel_error(g, g) == 0.0


def test_float32_stays_float32(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
    out = T.sigmoid(T.bilinear_resize(T.conv2d(x, w, None, 1, 1), 8, 8))
    assert out.dtype == np.float32
