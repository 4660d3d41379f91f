"""Bilinear gather, its scatter adjoint, and corner-aligned resize."""

from __future__ import annotations

import numpy as np

from bevfuse.interp import bilinear_gather, bilinear_scatter, bilinear_weights, resize_bilinear


class TestGather:
    def test_integer_positions_read_values_exactly(self):
        rng = np.random.default_rng(70)
        values = rng.standard_normal((2, 6, 9))
        rows = np.array([0.0, 3.0, 5.0])
        cols = np.array([8.0, 2.0, 0.0])
        out = bilinear_gather(values, rows, cols)
        for k in range(3):
            assert np.array_equal(out[:, k], values[:, int(rows[k]), int(cols[k])])

    def test_midpoint_averages_corners(self):
        values = np.zeros((1, 2, 2))
        values[0] = [[1.0, 3.0], [5.0, 7.0]]
        out = bilinear_gather(values, np.array([0.5]), np.array([0.5]))
        assert out[0, 0] == 4.0

    def test_linear_field_reproduced(self):
        # a field affine in (row, col) is interpolated without error
        r, c = np.meshgrid(np.arange(7.0), np.arange(11.0), indexing="ij")
        values = (2.0 * r - 0.5 * c + 3.0)[None]
        rng = np.random.default_rng(71)
        rows = rng.uniform(0, 6, 200)
        cols = rng.uniform(0, 10, 200)
        out = bilinear_gather(values, rows, cols)
        np.testing.assert_allclose(out[0], 2.0 * rows - 0.5 * cols + 3.0, atol=1e-12)

    def test_positions_clamp_to_border(self):
        values = np.arange(12.0).reshape(1, 3, 4)
        out = bilinear_gather(values, np.array([-2.0, 10.0]), np.array([-1.0, 99.0]))
        assert out[0, 0] == values[0, 0, 0]
        assert out[0, 1] == values[0, 2, 3]

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(72)
        rows = rng.uniform(-1, 7, 300)
        cols = rng.uniform(-1, 9, 300)
        _, _, _, _, w00, w01, w10, w11 = bilinear_weights(rows, cols, (6, 8))
        np.testing.assert_allclose(w00 + w01 + w10 + w11, 1.0, atol=1e-12)


class TestScatterAdjoint:
    def test_dot_product_identity(self):
        # <u, gather(v)> == <scatter(u), v> for random u, v: the defining
        # property of an adjoint pair
        rng = np.random.default_rng(73)
        for _ in range(10):
            values = rng.standard_normal((3, 5, 6))
            rows = rng.uniform(-0.5, 5.5, 17)
            cols = rng.uniform(-0.5, 6.5, 17)
            upstream = rng.standard_normal((3, 17))
            lhs = np.sum(upstream * bilinear_gather(values, rows, cols))
            rhs = np.sum(bilinear_scatter(upstream, rows, cols, (5, 6)) * values)
            assert abs(lhs - rhs) < 1e-10

    def test_duplicate_positions_accumulate(self):
        upstream = np.ones((1, 2))
        out = bilinear_scatter(upstream, np.array([1.0, 1.0]), np.array([2.0, 2.0]), (3, 4))
        assert out[0, 1, 2] == 2.0
        assert out.sum() == 2.0


class TestResize:
    def test_identity_when_shape_unchanged(self):
        rng = np.random.default_rng(74)
        values = rng.standard_normal((2, 4, 5))
        np.testing.assert_allclose(resize_bilinear(values, (4, 5)), values, atol=1e-12)

    def test_corners_map_to_corners(self):
        rng = np.random.default_rng(75)
        values = rng.standard_normal((1, 3, 4))
        out = resize_bilinear(values, (9, 13))
        assert out[0, 0, 0] == values[0, 0, 0]
        assert out[0, -1, 0] == values[0, -1, 0]
        assert out[0, 0, -1] == values[0, 0, -1]
        assert out[0, -1, -1] == values[0, -1, -1]

    def test_affine_map_stays_affine(self):
        r, c = np.meshgrid(np.arange(4.0), np.arange(6.0), indexing="ij")
        values = (1.5 * r + 0.25 * c)[None]
        out = resize_bilinear(values, (10, 16))
        # output position (i, j) samples input (i*3/9, j*5/15)
        ri = np.arange(10.0) * (3.0 / 9.0)
        ci = np.arange(16.0) * (5.0 / 15.0)
        rr, cc = np.meshgrid(ri, ci, indexing="ij")
        np.testing.assert_allclose(out[0], 1.5 * rr + 0.25 * cc, atol=1e-12)

    def test_single_row_output(self):
        values = np.arange(8.0).reshape(1, 2, 4)
        out = resize_bilinear(values, (1, 4))
        np.testing.assert_allclose(out[0, 0], values[0, 0], atol=1e-12)
