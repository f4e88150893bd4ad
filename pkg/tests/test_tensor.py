from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccdn.tensor import (
    ConvKernelBank,
    ShapeError,
    as_tensor,
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
)

from oracles import conv_reference, pool_reference


def random_bank(rng, cin, cout, k):
    return ConvKernelBank(rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout))


class TestTensorValidation:
    def test_two_dimensional_input_gets_channel_axis(self):
        assert as_tensor(np.zeros((3, 4))).shape == (3, 4, 1)

    @pytest.mark.parametrize("shape", [(3,), (2, 2, 2, 2), (0, 3, 1)])
    def test_bad_shapes_rejected(self, shape):
        with pytest.raises(ShapeError):
            as_tensor(np.zeros(shape))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            ConvKernelBank(np.zeros((1, 1, 2, 2)), np.zeros(1))

    def test_bias_count_checked(self):
        with pytest.raises(ShapeError):
            ConvKernelBank(np.zeros((2, 1, 3, 3)), np.zeros(3))

    def test_channel_mismatch(self, rng):
        bank = random_bank(rng, 2, 1, 3)
        with pytest.raises(ShapeError, match="channels"):
            conv2d_forward(np.zeros((4, 4, 3)), bank)

    def test_upstream_shape_checked(self, rng):
        bank = random_bank(rng, 1, 2, 3)
        with pytest.raises(ShapeError):
            conv2d_backward(np.zeros((4, 4, 1)), bank, np.zeros((4, 4, 3)))


class TestConv:
    @pytest.mark.parametrize("k,cin,cout,h,w", [(3, 1, 1, 5, 5), (3, 3, 2, 4, 6), (9, 1, 2, 6, 5),
                                                (5, 2, 3, 1, 7)])
    def test_matches_loop_reference(self, rng, k, cin, cout, h, w):
        x = rng.normal(size=(h, w, cin))
        bank = random_bank(rng, cin, cout, k)
        np.testing.assert_allclose(conv2d_forward(x, bank), conv_reference(x, bank.weights, bank.biases),
                                   rtol=1e-10, atol=1e-10)

    def test_output_keeps_spatial_size(self, rng):
        bank = random_bank(rng, 1, 20, 9)
        assert conv2d_forward(np.zeros((7, 11)), bank).shape == (7, 11, 20)

    def test_identity_kernel(self, rng):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        x = rng.normal(size=(5, 6, 1))
        np.testing.assert_array_equal(conv2d_forward(x, ConvKernelBank(w, np.zeros(1))), x)

    def test_shift_kernel_pads_with_zero(self):
        # weight at (row 1, col 2) reads x[i, j + 1]
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 2] = 1.0
        x = np.arange(12.0).reshape(3, 4, 1)
        out = conv2d_forward(x, ConvKernelBank(w, np.zeros(1)))[:, :, 0]
        np.testing.assert_array_equal(out, [[1, 2, 3, 0], [5, 6, 7, 0], [9, 10, 11, 0]])

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(5, 4, 2))
        bank = random_bank(rng, 2, 3, 3)
        up = rng.normal(size=(5, 4, 3))

        def objective(xx, ww, bb):
            return float((conv_reference(xx, ww, bb) * up).sum())

        gx, gw, gb = conv2d_backward(x, bank, up)
        eps = 1e-6
        # the objective is linear in each argument, so central differences are exact up to rounding
        for idx in [(0, 0, 0), (2, 3, 1), (4, 1, 0)]:
            d = np.zeros_like(x)
            d[idx] = eps
            num = (objective(x + d, bank.weights, bank.biases) - objective(x - d, bank.weights, bank.biases)) / (2 * eps)
            assert gx[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)
        for idx in [(0, 0, 0, 0), (2, 1, 2, 1), (1, 0, 1, 2)]:
            d = np.zeros_like(bank.weights)
            d[idx] = eps
            num = (objective(x, bank.weights + d, bank.biases) - objective(x, bank.weights - d, bank.biases)) / (2 * eps)
            assert gw[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)
        np.testing.assert_allclose(gb, up.sum(axis=(0, 1)))

    def test_input_gradient_is_adjoint(self, rng):
        # <conv(x) - b, u> == <x, conv^T(u)> for any x, u
        x = rng.normal(size=(6, 7, 3))
        bank = random_bank(rng, 3, 4, 5)
        up = rng.normal(size=(6, 7, 4))
        lhs = ((conv2d_forward(x, bank) - bank.biases) * up).sum()
        gx, _, _ = conv2d_backward(x, bank, up)
        assert lhs == pytest.approx((x * gx).sum(), rel=1e-10)

    def test_skip_input_gradient(self, rng):
        bank = random_bank(rng, 1, 2, 3)
        gx, gw, gb = conv2d_backward(np.ones((3, 3, 1)), bank, np.ones((3, 3, 2)), need_input_grad=False)
        assert gx is None and gw.shape == bank.weights.shape and gb.shape == (2,)

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(1, 6), w=st.integers(1, 6), cin=st.integers(1, 3), cout=st.integers(1, 3),
           k=st.sampled_from([1, 3, 5]), seed=st.integers(0, 2**32 - 1))
    def test_property_reference(self, h, w, cin, cout, k, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(h, w, cin))
        bank = random_bank(r, cin, cout, k)
        np.testing.assert_allclose(conv2d_forward(x, bank), conv_reference(x, bank.weights, bank.biases),
                                   rtol=1e-9, atol=1e-9)


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_subgradient_at_zero_is_zero(self):
        out = relu_backward(np.array([-1.0, 0.0, 2.0]), np.array([5.0, 5.0, 5.0]))
        np.testing.assert_array_equal(out, [0, 0, 5])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            relu_backward(np.zeros(3), np.zeros(4))


class TestMaxPool:
    def test_matches_reference(self, rng):
        x = rng.normal(size=(5, 6, 3))
        out, arg = maxpool2_forward(x)
        ref_out, ref_arg = pool_reference(x)
        np.testing.assert_array_equal(out, ref_out)
        np.testing.assert_array_equal(arg, ref_arg)

    def test_keeps_size_and_pads_bottom_right(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
        out, arg = maxpool2_forward(x)
        np.testing.assert_array_equal(out[:, :, 0], [[4, 4], [4, 4]])
        np.testing.assert_array_equal(arg[:, :, 0], [[3, 2], [1, 0]])

    def test_ties_go_to_first_cell(self):
        out, arg = maxpool2_forward(np.ones((3, 3, 1)))
        assert (arg[:2, :2] == 0).all()
        assert (out == 1).all()

    def test_padding_wins_over_negatives(self):
        out, _ = maxpool2_forward(-np.ones((2, 2, 1)))
        np.testing.assert_array_equal(out[:, :, 0], [[-1, 0], [0, 0]])

    def test_backward_routes_to_winner(self, rng):
        x = rng.normal(size=(4, 5, 2))
        _, arg = maxpool2_forward(x)
        up = rng.normal(size=(4, 5, 2))
        g = maxpool2_backward(arg, up)
        ref = np.zeros((5, 6, 2))
        offsets = [(0, 0), (0, 1), (1, 0), (1, 1)]
        for i in range(4):
            for j in range(5):
                for c in range(2):
                    dy, dx = offsets[arg[i, j, c]]
                    ref[i + dy, j + dx, c] += up[i, j, c]
        np.testing.assert_allclose(g, ref[:4, :5])

    def test_backward_shape_checked(self):
        with pytest.raises(ShapeError):
            maxpool2_backward(np.zeros((2, 2, 1), dtype=np.uint8), np.zeros((3, 2, 1)))

    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(1, 6), w=st.integers(1, 6), c=st.integers(1, 3), seed=st.integers(0, 2**32 - 1),
           discrete=st.booleans())
    def test_property_reference(self, h, w, c, seed, discrete):
        r = np.random.default_rng(seed)
        # small integer grids force ties and padding wins
        x = r.integers(-2, 3, size=(h, w, c)).astype(float) if discrete else r.normal(size=(h, w, c))
        out, arg = maxpool2_forward(x)
        ref_out, ref_arg = pool_reference(x)
        np.testing.assert_array_equal(out, ref_out)
        np.testing.assert_array_equal(arg, ref_arg)
