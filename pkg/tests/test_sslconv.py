import numpy as np
import pytest

from stripseg import grid, sslconv
from stripseg.errors import ContractViolation

import oracles

M = 9


def make_set(rng, co=1, ci=1, m=M, with_predictor=False):
    pred = None
    if with_predictor:
        pred = grid.PlainKernel(
            rng.normal(size=(4 * (m - 1), ci, 3, 3)).astype(np.float32) * 0.2,
            rng.normal(size=4 * (m - 1)).astype(np.float32) * 0.2)
    return sslconv.StripKernelSet(
        rng.normal(size=(4, co, ci, m)).astype(np.float32),
        rng.normal(size=co).astype(np.float32), pred)


def random_offsets(rng, nb, h, w, m=M, scale=0.8):
    raw = (rng.normal(size=(nb, 4 * (m - 1), h, w)) * scale).astype(np.float32)
    return sslconv.accumulate_offsets(raw, m)


class TestPredictRawIncrements:
    def test_zero_predictor_gives_zero_field(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 6, 6)).astype(np.float32)
        pred = grid.PlainKernel(np.zeros((4 * (M - 1), 2, 3, 3), np.float32),
                                np.zeros(4 * (M - 1), np.float32))
        raw = sslconv.predict_raw_increments(x, pred)
        assert raw.shape == (1, 32, 6, 6)
        np.testing.assert_array_equal(raw, 0)

    def test_delta_kernel_on_constant_input_is_constant(self):
        x = np.full((1, 1, 8, 8), 0.6, np.float32)
        w = np.zeros((32, 1, 3, 3), np.float32)
        w[:, 0, 1, 1] = np.arange(32)
        raw = sslconv.predict_raw_increments(
            x, grid.PlainKernel(w, np.zeros(32, np.float32)))
        expect = 0.6 * np.arange(32, dtype=np.float32)
        for k in range(32):
            np.testing.assert_allclose(raw[0, k], expect[k], rtol=1e-6)

    def test_matches_conv_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        pred = grid.PlainKernel(rng.normal(size=(16, 3, 3, 3)).astype(np.float32),
                                rng.normal(size=16).astype(np.float32))
        raw = sslconv.predict_raw_increments(x, pred)
        ref = oracles.conv2d_direct(x, pred.weights, pred.bias, 1)
        assert np.abs(raw - ref).max() <= 1e-5

    def test_channel_mismatch_raises(self):
        x = np.zeros((1, 2, 4, 4), np.float32)
        pred = grid.PlainKernel(np.zeros((32, 3, 3, 3), np.float32),
                                np.zeros(32, np.float32))
        with pytest.raises(ContractViolation):
            sslconv.predict_raw_increments(x, pred)


class TestAccumulateOffsets:
    def test_zero_raw_gives_zero_displacements(self):
        field = sslconv.accumulate_offsets(np.zeros((1, 32, 4, 4), np.float32), M)
        np.testing.assert_array_equal(field.delta, 0)

    def test_saturated_raw_counts_outward(self):
        field = sslconv.accumulate_offsets(np.full((1, 32, 2, 2), 20.0, np.float32), M)
        for side in range(2):
            for k in range(4):
                np.testing.assert_allclose(field.delta[0, :, side * 4 + k],
                                           k + 1.0, atol=1e-4)

    def test_hand_computed_tanh_cumsum(self):
        raw = np.zeros((1, 32, 1, 1), np.float32)
        raw[0, 0], raw[0, 1], raw[0, 2] = 0.5, -0.5, 0.25
        d = sslconv.accumulate_offsets(raw, M).delta[0, 0, :, 0, 0]
        np.testing.assert_allclose(d[:3], [0.4621, 0.0, 0.2449], atol=1e-4)

    def test_constraint_holds_on_random_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            raw = (rng.normal(size=(1, 32, 6, 6)) * rng.uniform(0.1, 30)).astype(np.float32)
            field = sslconv.accumulate_offsets(raw, M)
            assert field.max_adjacent_step() <= 1.0

    def test_bad_channel_count_raises(self):
        with pytest.raises(ContractViolation):
            sslconv.accumulate_offsets(np.zeros((1, 30, 4, 4), np.float32), M)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(1, 16, 3, 3))  # m = 5
        cot = rng.normal(size=(1, 4, 4, 3, 3))
        field, ctx = sslconv.accumulate_offsets_forward(raw, 5)
        g = sslconv.accumulate_offsets_backward(cot, ctx)
        num = oracles.central_diff(
            lambda v: float((sslconv.accumulate_offsets(v, 5).delta * cot).sum()),
            raw, eps=1e-5)
        assert oracles.max_rel_err(g, num) <= 1e-6


class TestSslForward:
    def test_constant_field_interior_sum(self):
        kern = sslconv.StripKernelSet(np.ones((4, 1, 1, M), np.float32),
                                      np.zeros(1, np.float32))
        x = np.ones((1, 1, 32, 32), np.float32)
        off = sslconv.OffsetField(np.zeros((1, 4, M - 1, 32, 32), np.float32))
        y = sslconv.ssl_forward(x, kern, off)
        assert y[0, 0, 16, 16] == pytest.approx(36.0)

    def test_zero_offsets_equal_fixed_strips(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 10, 10)).astype(np.float32)
        kern = make_set(rng, co=2, ci=2)
        off = sslconv.OffsetField(np.zeros((1, 4, M - 1, 10, 10), np.float32))
        y = sslconv.ssl_forward(x, kern, off)
        ref = oracles.strip_sum_direct(x, kern.weights, kern.bias)
        assert np.abs(y - ref).max() <= 1e-6

    def test_none_offsets_equal_fixed_strips(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 1, 8, 8)).astype(np.float32)
        kern = make_set(rng)
        y = sslconv.ssl_forward(x, kern, None)
        ref = oracles.strip_sum_direct(x, kern.weights, kern.bias)
        assert np.abs(y - ref).max() <= 1e-6

    def test_random_offsets_match_tap_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 2, 9, 9)).astype(np.float32)
        kern = make_set(rng, co=2, ci=2)
        off = random_offsets(rng, 1, 9, 9)
        y = sslconv.ssl_forward(x, kern, off)
        ref = oracles.ssl_direct(x, kern.weights, kern.bias, off.delta)
        assert np.abs(y - ref).max() <= 1e-5

    def test_direction_subsets_match_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 1, 9, 9)).astype(np.float32)
        kern = make_set(rng)
        off = random_offsets(rng, 1, 9, 9)
        for dirs in ((0, 1), (2, 3)):
            y = sslconv.ssl_forward(x, kern, off, directions=dirs)
            ref = oracles.ssl_direct(x, kern.weights, kern.bias, off.delta, dirs)
            assert np.abs(y - ref).max() <= 1e-5

    def test_translation_equivariance_at_zero_offsets(self):
        rng = np.random.default_rng(8)
        x = np.zeros((1, 1, 18, 18), np.float32)
        x[0, 0, 6:12, 6:12] = rng.normal(size=(6, 6)).astype(np.float32)
        kern = make_set(rng)
        shifted = np.roll(x, 1, axis=2)
        y = sslconv.ssl_forward(x, kern, None)
        ys = sslconv.ssl_forward(shifted, kern, None)
        # compare away from borders: no strip tap reaches the edge there
        np.testing.assert_allclose(ys[0, 0, 7:17, 6:12], y[0, 0, 6:16, 6:12],
                                   atol=1e-5)

    def test_dim_mismatch_raises(self):
        rng = np.random.default_rng(9)
        kern = make_set(rng, ci=2)
        with pytest.raises(ContractViolation):
            sslconv.ssl_forward(np.zeros((1, 1, 8, 8), np.float32), kern, None)
        off = sslconv.OffsetField(np.zeros((1, 4, M - 1, 4, 4), np.float32))
        with pytest.raises(ContractViolation):
            sslconv.ssl_forward(np.zeros((1, 2, 8, 8), np.float32), kern, off)


class TestSslBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 1, 8, 8)).astype(np.float32)
        kern = make_set(rng)
        raw = rng.normal(size=(1, 32, 8, 8)).astype(np.float32)
        off, acc = sslconv.accumulate_offsets_forward(raw, M)
        _, ctx = sslconv.ssl_forward_ctx(x, kern, off, None, acc)
        g = sslconv.ssl_backward(np.zeros((1, 1, 8, 8), np.float32), ctx)
        np.testing.assert_array_equal(g.x, 0)
        np.testing.assert_array_equal(g.weights, 0)
        np.testing.assert_array_equal(g.bias, 0)
        np.testing.assert_array_equal(g.raw, 0)

    def test_single_pixel_grad_reads_input_taps(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 1, 11, 11)).astype(np.float32)
        kern = make_set(rng)
        _, ctx = sslconv.ssl_forward_ctx(x, kern, None)
        gy = np.zeros((1, 1, 11, 11), np.float32)
        gy[0, 0, 5, 5] = 1.0
        g = sslconv.ssl_backward(gy, ctx)
        half = (M - 1) // 2
        for d, (tr, tc) in enumerate(oracles.STRIP_TANGENTS):
            for ti in range(M):
                t = ti - half
                expect = x[0, 0, 5 + tr * t, 5 + tc * t]
                assert g.weights[d, 0, 0, ti] == pytest.approx(expect, rel=1e-6)

    def test_full_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        m = 5
        x = rng.normal(size=(1, 2, 10, 10))
        kern = sslconv.StripKernelSet(rng.normal(size=(4, 2, 2, m)) * 0.5,
                                      rng.normal(size=2))
        raw = rng.normal(size=(1, 4 * (m - 1), 10, 10)) * 0.7
        cot = rng.normal(size=(1, 2, 10, 10))

        def loss(x_, w_, b_, raw_):
            k = sslconv.StripKernelSet(w_, b_)
            off = sslconv.accumulate_offsets(raw_, m)
            return float((sslconv.ssl_forward(x_, k, off) * cot).sum())

        off, acc = sslconv.accumulate_offsets_forward(raw, m)
        _, ctx = sslconv.ssl_forward_ctx(x, kern, off, None, acc)
        g = sslconv.ssl_backward(cot, ctx)
        assert oracles.max_rel_err(
            g.x, oracles.central_diff(
                lambda v: loss(v, kern.weights, kern.bias, raw), x, 1e-5)) <= 1e-5
        assert oracles.max_rel_err(
            g.weights, oracles.central_diff(
                lambda v: loss(x, v, kern.bias, raw), kern.weights, 1e-5)) <= 1e-5
        assert oracles.max_rel_err(
            g.bias, oracles.central_diff(
                lambda v: loss(x, kern.weights, v, raw), kern.bias, 1e-5)) <= 1e-5
        assert oracles.max_rel_err(
            g.raw, oracles.central_diff(
                lambda v: loss(x, kern.weights, kern.bias, v), raw, 1e-5)) <= 1e-5

    def test_stale_ctx_rejected(self):
        with pytest.raises(ContractViolation):
            sslconv.ssl_backward(np.zeros((1, 1, 4, 4), np.float32), None)

    def test_grad_shape_mismatch_rejected(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(1, 1, 8, 8)).astype(np.float32)
        _, ctx = sslconv.ssl_forward_ctx(x, make_set(rng), None)
        with pytest.raises(ContractViolation):
            sslconv.ssl_backward(np.zeros((1, 2, 8, 8), np.float32), ctx)


class TestKernelSetValidation:
    def test_even_length_rejected(self):
        with pytest.raises(ContractViolation):
            sslconv.StripKernelSet(np.zeros((4, 1, 1, 8), np.float32),
                                   np.zeros(1, np.float32))

    def test_wrong_direction_count_rejected(self):
        with pytest.raises(ContractViolation):
            sslconv.StripKernelSet(np.zeros((3, 1, 1, 9), np.float32),
                                   np.zeros(1, np.float32))

    def test_predictor_channel_contract(self):
        pred = grid.PlainKernel(np.zeros((30, 1, 3, 3), np.float32),
                                np.zeros(30, np.float32))
        with pytest.raises(ContractViolation):
            sslconv.StripKernelSet(np.zeros((4, 1, 1, 9), np.float32),
                                   np.zeros(1, np.float32), pred)
