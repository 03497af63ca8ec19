import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from cpaseg import tensor as T
from cpaseg.gradcheck import check_function, primitive_suite
from cpaseg.tensor import Tensor


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 3))
        np.testing.assert_array_equal(T.matmul(t(np.eye(3)), t(a)).data, a)

    def test_annihilator(self, rng):
        a = rng.standard_normal((3, 3))
        assert not T.matmul(t(a), t(np.zeros((3, 3)))).data.any()

    def test_two_by_two(self):
        a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
        expected = oracles.matmul(a, b)
        np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
        np.testing.assert_array_equal(T.matmul(t(a), t(b)).data, expected)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))


class TestSoftmax:
    def test_equal_row(self):
        np.testing.assert_allclose(T.softmax_rows(t(np.full((1, 5), 3.0))).data, np.full((1, 5), 0.2))

    def test_single_element(self):
        assert T.softmax_rows(t([[7.5]])).data[0, 0] == 1.0

    def test_log_three(self):
        np.testing.assert_allclose(T.softmax_rows(t([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)

    def test_non_finite_input(self):
        with pytest.raises(T.NumericError):
            T.softmax_rows(t([[0.0, np.inf]]))

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (3, 6), elements=st.floats(-30, 30)),
        st.floats(-50, 50),
    )
    def test_rows_stochastic_and_shift_invariant(self, a, c):
        p = T.softmax_rows(t(a)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert (p >= 0).all()
        np.testing.assert_allclose(T.softmax_rows(t(a + c)).data, p, atol=1e-6)


class TestConv:
    def test_pointwise_identity(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(T.conv2d(t(x), t(w), t(np.zeros(3))).data, x)

    def test_all_ones_kernel_counts_taps(self):
        v = 2.5
        out = T.conv2d(t(np.full((1, 1, 6, 6), v)), t(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
        assert out[2, 3] == 9 * v
        assert out[0, 0] == out[0, 5] == out[5, 0] == out[5, 5] == 4 * v
        assert out[0, 2] == 6 * v

    def test_dilated_impulse_response(self, rng):
        x = np.zeros((1, 1, 7, 7))
        x[0, 0, 3, 3] = 1.0
        w = rng.standard_normal((1, 1, 3, 3))
        expected = oracles.conv2d(x, w, padding=2, dilation=2)
        got = T.conv2d(t(x), t(w), padding=2, dilation=2).data
        np.testing.assert_allclose(got, expected, atol=1e-12)
        support = {(int(r) - 3, int(c) - 3) for r, c in np.argwhere(expected[0, 0] != 0)}
        assert support == {(dr, dc) for dr in (-2, 0, 2) for dc in (-2, 0, 2)}

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 3, 3)])
    def test_matches_direct_loops(self, rng, stride, padding, dilation):
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = T.conv2d(t(x), t(w), t(b), stride, padding, dilation).data
        np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, padding, dilation), atol=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_same_padding_preserves_extent(self, rng, k):
        x = t(rng.standard_normal((1, 2, 9, 11)))
        out = T.conv2d(x, t(rng.standard_normal((3, 2, k, k))), padding=(k - 1) // 2)
        assert out.shape[2:] == (9, 11)

    def test_output_size_formula(self):
        assert T.conv_output_size(64, 7, 2, 3, 1) == 32
        assert T.conv_output_size(8, 3, 1, 4, 4) == 8

    def test_negative_extent(self):
        with pytest.raises(T.ConfigError):
            T.conv2d(t(np.zeros((1, 1, 3, 3))), t(np.zeros((1, 1, 3, 3))), dilation=3)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(t(np.zeros((1, 2, 3, 3))), t(np.zeros((1, 3, 1, 1))))


class TestBatchNorm:
    def test_train_standardizes(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        out = T.batchnorm2d(t(x), t(np.ones(3)), t(np.zeros(3)), None, None, True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_eval_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        out = T.batchnorm2d(t(x), t(np.ones(3)), t(np.zeros(3)), np.zeros(3), np.ones(3), False).data
        np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5), atol=1e-15)
        np.testing.assert_allclose(out, x, rtol=1e-5)

    def test_two_value_batch(self):
        # values 1 and 3: mean 2, biased variance 1
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        rm, rv = np.zeros(1), np.ones(1)
        out = T.batchnorm2d(t(x), t([2.0]), t([0.5]), rm, rv, True).data.ravel()
        scale = 1 / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(out, [0.5 - 2 * scale, 0.5 + 2 * scale], rtol=1e-12)
        # running stats: momentum 0.1 toward mean 2 and unbiased variance 2
        np.testing.assert_allclose(rm, [0.2])
        np.testing.assert_allclose(rv, [0.9 + 0.2])

    def test_eval_needs_running_stats(self):
        with pytest.raises(T.StateError):
            T.batchnorm2d(t(np.zeros((1, 1, 2, 2))), t([1.0]), t([0.0]), None, None, False)

    def test_parameter_length(self):
        with pytest.raises(T.ShapeError):
            T.batchnorm2d(t(np.zeros((1, 2, 2, 2))), t([1.0]), t([0.0]), None, None, True)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(t([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_subgradient_zero_at_kink(self):
        x = t([-1.0, 0.0, 2.0], grad=True)
        T.sum_all(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_add_zero(self, rng):
        x = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(T.add(t(x), t(np.zeros((2, 3)))).data, x)

    def test_scalar_mul(self, rng):
        x = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(T.scalar_mul(0.05, t(x)).data, x * 0.05)

    def test_add_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(t(np.zeros(3)), t(np.zeros(4)))

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_non_finite_result_is_an_error(self):
        with pytest.raises(T.NumericError, match="scalar_mul"):
            T.scalar_mul(1e300, t([1e300]))


class TestPooling:
    def test_constant(self):
        out = T.avg_pool2d(t(np.full((1, 2, 8, 8), 4.0)), 2, 2).data
        assert out.shape == (1, 2, 4, 4) and (out == 4.0).all()

    def test_two_by_two(self):
        assert T.avg_pool2d(t([[[[1.0, 2.0], [3.0, 5.0]]]]), 2, 2).data[0, 0, 0, 0] == 2.75

    def test_ramp(self):
        ramp = np.arange(16.0).reshape(4, 4)
        expected = oracles.window_means(ramp, 2, 2)
        np.testing.assert_array_equal(expected, [[2.5, 4.5], [10.5, 12.5]])
        np.testing.assert_array_equal(T.avg_pool2d(t(ramp[None, None]), 2, 2).data[0, 0], expected)

    def test_window_too_large(self):
        with pytest.raises(T.ConfigError):
            T.avg_pool2d(t(np.zeros((1, 1, 2, 2))), 3, 1)

    def test_max_pool_first_tap_wins_ties(self):
        x = t(np.zeros((1, 1, 2, 2)), grad=True)
        T.sum_all(T.max_pool2d(x, 2, 2)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


class TestBilinear:
    def test_same_size_identity(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        np.testing.assert_array_equal(T.bilinear_resize(t(x), 3, 4).data, x)

    @pytest.mark.parametrize("size", [(1, 1), (5, 7), (16, 3)])
    def test_constant(self, size):
        out = T.bilinear_resize(t(np.full((1, 1, 4, 4), 1.5)), *size).data
        np.testing.assert_allclose(out, 1.5, atol=1e-15)

    def test_half_pixel_row(self):
        # output centers map to source x = (i + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25,
        # clamped to [0, 1]: values 0, 0.25, 0.75, 1
        out = T.bilinear_resize(t([[[[0.0, 1.0]]]]), 1, 4).data
        np.testing.assert_allclose(out[0, 0, 0], [0.0, 0.25, 0.75, 1.0])

    def test_gradient_scatters_with_interpolation_weights(self):
        x = t([[[[0.0, 1.0]]]], grad=True)
        T.sum_all(T.bilinear_resize(x, 1, 4)).backward()
        np.testing.assert_allclose(x.grad[0, 0, 0], [1 + 0.75 + 0.25, 0.25 + 0.75 + 1])

    def test_bad_target(self):
        with pytest.raises(T.ConfigError):
            T.bilinear_resize(t(np.zeros((1, 1, 2, 2))), 0, 3)


class TestBackward:
    def test_sum(self, rng):
        x = t(rng.standard_normal((2, 3)), grad=True)
        T.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self, rng):
        v = rng.standard_normal((2, 3))
        x = t(v, grad=True)
        T.sum_all(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * v)

    def test_fan_out_accumulates(self, rng):
        x = t(rng.standard_normal((2, 3)), grad=True)
        T.add(T.sum_all(x), T.sum_all(x)).backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones((2, 3)))

    def test_repeated_backward_accumulates(self, rng):
        x = t(rng.standard_normal(3), grad=True)
        loss = T.sum_all(x)
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2, 2, 2])
        x.zero_grad()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_non_scalar_loss(self):
        with pytest.raises(T.ShapeError):
            t(np.zeros(3), grad=True).backward()

    def test_no_grad_builds_no_graph(self):
        x = t(np.ones(3), grad=True)
        with T.no_grad():
            y = T.scalar_mul(2.0, x)
        assert not y.requires_grad

    def test_reverse_execution_order(self):
        order = []
        x = t(np.ones(2), grad=True)
        y = T.scalar_mul(2.0, x)
        z = T.scalar_mul(3.0, y)
        loss = T.sum_all(z)
        for node, tag in ((y, "y"), (z, "z"), (loss, "loss")):
            inner = node._backward

            def wrapped(g, inner=inner, tag=tag):
                order.append(tag)
                return inner(g)

            node._backward = wrapped
        loss.backward()
        assert order == ["loss", "z", "y"]


def test_default_storage_is_32_bit():
    assert Tensor(np.zeros(2)).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor(np.zeros(2)).dtype == np.float64


def test_primitives_are_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    runs = [T.bilinear_resize(T.softmax_rows(T.conv2d(Tensor(x), Tensor(w), padding=1, dilation=1)), 5, 5).data for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


@pytest.mark.parametrize("result", primitive_suite(), ids=lambda r: r.name)
def test_primitive_gradients_64bit(result):
    assert result.max_rel_err < 1e-4


def test_primitive_gradient_32bit_tolerance(rng):
    # same check in 32-bit storage, looser bound
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    proj = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
    T.sum_all(T.mul(T.conv2d(xt, wt, padding=1), Tensor(proj))).backward()
    num = np.zeros_like(x)
    h = 1e-2
    for idx in np.ndindex(*x.shape):
        for sign in (1, -1):
            xp = x.copy()
            xp[idx] += sign * h
            num[idx] += sign * float((T.conv2d(Tensor(xp), Tensor(w), padding=1).data * proj).sum()) / (2 * h)
    err = np.abs(num - xt.grad).max() / np.abs(num).max()
    assert err < 1e-2


def test_check_function_reports_bad_gradient():
    def broken(x):
        out = T.scalar_mul(2.0, x)
        out._backward = lambda g: (g,)  # claims derivative 1
        return out

    assert check_function("broken", broken, [np.ones((2, 2))]).max_rel_err > 0.1
