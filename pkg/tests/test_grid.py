import numpy as np
import pytest

from stripseg import grid
from stripseg.errors import ContractViolation

import oracles


def make_kernel(rng, co, ci, k):
    return grid.PlainKernel(rng.normal(size=(co, ci, k, k)).astype(np.float32),
                            rng.normal(size=co).astype(np.float32))


class TestConv2d:
    def test_all_ones_padding_arithmetic(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        k = grid.PlainKernel(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
        y = grid.conv2d_standard(x, k, 1)
        assert y[0, 0, 1, 1] == 9.0
        for i, j in ((0, 0), (0, 2), (2, 0), (2, 2)):
            assert y[0, 0, i, j] == 4.0

    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 6, 5)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = grid.conv2d_standard(x, grid.PlainKernel(w, np.zeros(3, np.float32)), 1)
        np.testing.assert_array_equal(y, x)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        k = make_kernel(rng, 4, 3, 3)
        y = grid.conv2d_standard(x, k, 1)
        ref = oracles.conv2d_direct(x, k.weights, k.bias, 1)
        assert np.abs(y - ref).max() <= 1e-5

    def test_oracle_agreement_many_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n, ci, co = (int(v) for v in rng.integers(1, 4, size=3))
            h, w = (int(v) for v in rng.integers(2, 7, size=2))
            k = int(rng.choice([1, 3]))
            x = rng.normal(size=(n, ci, h, w)).astype(np.float32)
            kern = make_kernel(rng, co, ci, k)
            y = grid.conv2d_standard(x, kern, (k - 1) // 2)
            ref = oracles.conv2d_direct(x, kern.weights, kern.bias, (k - 1) // 2)
            assert np.abs(y - ref).max() <= 1e-5

    def test_channel_mismatch_raises(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        k = make_kernel(rng, 1, 3, 3)
        with pytest.raises(ContractViolation, match="2.*3|3.*2"):
            grid.conv2d_standard(x, k, 1)

    def test_bad_pad_raises(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        with pytest.raises(ContractViolation):
            grid.conv2d_standard(x, make_kernel(rng, 1, 2, 3), 0)

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            grid.PlainKernel(np.zeros((1, 1, 2, 2), np.float32), np.zeros(1, np.float32))

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 2, 8, 8))
        k = grid.PlainKernel(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
        cot = rng.normal(size=(1, 2, 8, 8))
        y, ctx = grid.conv2d_forward(x, k, 1)
        gx, gw, gb = grid.conv2d_backward(cot, ctx)
        num = oracles.central_diff(
            lambda v: float((grid.conv2d_standard(v, k, 1) * cot).sum()), x)
        assert oracles.max_rel_err(gx, num) <= 1e-5
        num_w = oracles.central_diff(
            lambda v: float((grid.conv2d_standard(x, grid.PlainKernel(v, k.bias), 1)
                             * cot).sum()), k.weights)
        assert oracles.max_rel_err(gw, num_w) <= 1e-5
        num_b = oracles.central_diff(
            lambda v: float((grid.conv2d_standard(x, grid.PlainKernel(k.weights, v), 1)
                             * cot).sum()), k.bias)
        assert oracles.max_rel_err(gb, num_b) <= 1e-5


class TestBilinear:
    plane = np.array([[0.0, 1.0], [2.0, 3.0]])

    def test_center_mean(self):
        assert grid.bilinear_sample(self.plane, 0.5, 0.5) == pytest.approx(1.5)

    def test_grid_point(self):
        assert grid.bilinear_sample(self.plane, 1, 0) == pytest.approx(2.0)

    def test_hand_values_with_zero_padding(self):
        assert grid.bilinear_sample(self.plane, 1.0, 0.5) == pytest.approx(2.5)
        assert grid.bilinear_sample(self.plane, -0.5, 0.5) == pytest.approx(0.25)

    def test_exact_at_integer_in_bounds(self):
        rng = np.random.default_rng(6)
        plane = rng.normal(size=(4, 5))
        for i in range(4):
            for j in range(5):
                assert grid.bilinear_sample(plane, i, j) == pytest.approx(
                    plane[i, j], rel=1e-12)

    def test_zero_when_fully_outside(self):
        assert grid.bilinear_sample(self.plane, -2.0, 0.0) == 0.0
        assert grid.bilinear_sample(self.plane, 0.0, 5.5) == 0.0

    def test_matches_oracle_on_random_points(self):
        rng = np.random.default_rng(7)
        plane = rng.normal(size=(5, 6))
        for _ in range(50):
            r = float(rng.uniform(-2, 7))
            c = float(rng.uniform(-2, 8))
            assert grid.bilinear_sample(plane, r, c) == pytest.approx(
                oracles.bilinear_direct(plane, r, c), abs=1e-12)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        plane = rng.normal(size=(5, 5))
        for r, c in ((1.3, 2.7), (-0.4, 1.2), (3.6, 4.4)):
            gplane, gr, gc = grid.bilinear_sample_vjp(plane, r, c)
            num = oracles.central_diff(lambda v: grid.bilinear_sample(v, r, c), plane)
            assert oracles.max_rel_err(gplane, num) <= 1e-5
            num_r = (grid.bilinear_sample(plane, r + 1e-6, c)
                     - grid.bilinear_sample(plane, r - 1e-6, c)) / 2e-6
            num_c = (grid.bilinear_sample(plane, r, c + 1e-6)
                     - grid.bilinear_sample(plane, r, c - 1e-6)) / 2e-6
            assert oracles.max_rel_err(gr, num_r) <= 1e-5
            assert oracles.max_rel_err(gc, num_c) <= 1e-5


class TestPoolUpsample:
    def test_pool_max(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32)
        np.testing.assert_array_equal(grid.pool_down2(x), [[[[4.0]]]])

    def test_upsample_replicates(self):
        x = np.array([[[[5.0]]]], np.float32)
        np.testing.assert_array_equal(
            grid.upsample2(x), [[[[5.0, 5.0], [5.0, 5.0]]]])

    def test_pool_of_upsample_is_identity(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        np.testing.assert_array_equal(grid.pool_down2(grid.upsample2(x)), x)

    def test_pool_round_trip_idempotent(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 8, 8)).astype(np.float32)
        once = grid.pool_down2(x)
        again = grid.pool_down2(grid.upsample2(once))
        np.testing.assert_array_equal(once, again)

    def test_odd_dims_rejected(self):
        with pytest.raises(ContractViolation):
            grid.pool_down2(np.zeros((1, 1, 3, 4), np.float32))

    def test_tie_break_first_index(self):
        x = np.full((1, 1, 2, 2), 7.0, np.float32)
        y, ctx = grid.pool_down2_forward(x)
        g = grid.pool_down2_backward(np.ones((1, 1, 1, 1), np.float32), ctx)
        np.testing.assert_array_equal(
            g[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_vjps_match_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 2, 8, 8))
        cot = rng.normal(size=(1, 2, 4, 4))
        _, ctx = grid.pool_down2_forward(x)
        gx = grid.pool_down2_backward(cot, ctx)
        num = oracles.central_diff(
            lambda v: float((grid.pool_down2(v) * cot).sum()), x)
        assert oracles.max_rel_err(gx, num) <= 1e-5
        cot_up = rng.normal(size=(1, 2, 16, 16))
        gup = grid.upsample2_backward(cot_up)
        num_up = oracles.central_diff(
            lambda v: float((grid.upsample2(v) * cot_up).sum()), x)
        assert oracles.max_rel_err(gup, num_up) <= 1e-5


class TestPointwise:
    def test_relu_values(self):
        x = np.array([[[[-2.0, 3.0]]]], np.float32)
        np.testing.assert_array_equal(grid.pointwise(x, "relu"),
                                      [[[[0.0, 3.0]]]])

    def test_sigmoid_at_zero(self):
        assert grid.pointwise(np.zeros((1, 1, 1, 1)), "sigmoid")[0, 0, 0, 0] == 0.5

    def test_sigmoid_open_interval(self):
        x = np.array([[[[-80.0, 80.0]]]], np.float32)
        y = grid.pointwise(x, "sigmoid")
        assert 0.0 < y.min() and y.max() < 1.0

    def test_sigmoid_gradient_quarter_at_zero(self):
        x = np.zeros((1, 1, 1, 1))
        y = grid.sigmoid(x)
        ga = grid.sigmoid_vjp(np.ones_like(x), y)
        num = oracles.central_diff(lambda v: float(grid.sigmoid(v).sum()), x)
        assert ga[0, 0, 0, 0] == pytest.approx(0.25, abs=1e-9)
        assert oracles.max_rel_err(ga, num) <= 1e-6

    def test_unknown_kind_rejected(self):
        with pytest.raises(ContractViolation):
            grid.pointwise(np.zeros((1, 1, 1, 1)), "tanh")
