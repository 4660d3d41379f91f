"""BEV voxelization: weight splitting, mass conservation, determinism."""

from __future__ import annotations

import numpy as np
import pytest

from bevfuse.errors import ConfigError
from bevfuse.voxelize import (
    BevTensor,
    VoxelGridConfig,
    point_voxel_index,
    points_voxel_indices,
    trilinear_contributions,
    voxelize_trilinear,
)

SMALL = VoxelGridConfig(x_range=(0, 8), y_range=(-4, 4), z_range=(-2, 2), resolution=(16, 16, 8))


def random_points(rng, n, grid=SMALL):
    return np.column_stack(
        [
            rng.uniform(grid.x_range[0], grid.x_range[1], n),
            rng.uniform(grid.y_range[0], grid.y_range[1], n),
            rng.uniform(grid.z_range[0], grid.z_range[1], n),
        ]
    )


class TestGridConfig:
    def test_default_grid_matches_contract(self):
        grid = VoxelGridConfig()
        assert grid.resolution == (448, 512, 32)
        assert grid.x_range == (0.0, 70.0)
        assert grid.y_range == (-40.0, 40.0)
        ex, ey, _ = grid.edges
        assert ex == pytest.approx(0.15625)
        assert ey == pytest.approx(0.15625)

    def test_rejects_empty_ranges_and_counts(self):
        with pytest.raises(ConfigError):
            VoxelGridConfig(x_range=(5, 5))
        with pytest.raises(ConfigError):
            VoxelGridConfig(resolution=(0, 16, 8))

    def test_dict_roundtrip(self):
        grid = VoxelGridConfig(x_range=(0, 10), y_range=(-5, 5), z_range=(-1, 3), resolution=(4, 5, 6))
        assert VoxelGridConfig.from_dict(grid.to_dict()) == grid


class TestVoxelIndices:
    def test_known_cells(self):
        idx, ok = points_voxel_indices(np.array([[0.25, -3.75, -1.75]]), SMALL)
        assert ok[0]
        # edge 0.5 on every axis for SMALL
        assert tuple(idx[0]) == (0, 0, 0)
        idx, ok = points_voxel_indices(np.array([[7.99, 3.99, 1.99]]), SMALL)
        assert tuple(idx[0]) == (15, 15, 7)

    def test_bounds_are_half_open(self):
        inside, ok_in = points_voxel_indices(np.array([[0.0, -4.0, -2.0]]), SMALL)
        assert ok_in[0] and tuple(inside[0]) == (0, 0, 0)
        _, ok_out = points_voxel_indices(np.array([[8.0, 0.0, 0.0]]), SMALL)
        assert not ok_out[0]

    def test_nan_points_are_out_of_bounds(self):
        _, ok = points_voxel_indices(np.array([[np.nan, 0.0, 0.0]]), SMALL)
        assert not ok[0]

    def test_single_point_helper(self):
        vi = point_voxel_index((1.0, 0.0, 0.0), SMALL)
        assert (vi.ix, vi.iy, vi.iz) == (2, 8, 4)


class TestTrilinearWeights:
    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(10)
        pts = random_points(rng, 2000)
        nodes, weights, point_id = trilinear_contributions(pts, SMALL)
        assert nodes.shape == weights.shape == point_id.shape == (2000 * 8,)
        sums = np.bincount(point_id, weights=weights, minlength=2000)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_point_on_lattice_plane_hits_single_node(self):
        pts = np.array([[1.0, 0.0, 0.0]])  # fraction exactly 0 on every axis
        nodes, weights, _ = trilinear_contributions(pts, SMALL)
        nonzero = weights > 0
        assert np.count_nonzero(nonzero) == 1
        assert weights[nonzero][0] == pytest.approx(1.0)

    def test_known_half_cell_split(self):
        # halfway along x between two lattice planes, exact on y and z
        pts = np.array([[0.25, 0.0, 0.0]])
        nodes, weights, _ = trilinear_contributions(pts, SMALL)
        w = weights[weights > 0]
        assert sorted(w.tolist()) == pytest.approx([0.5, 0.5])

    def test_out_of_bounds_contribute_nothing(self):
        pts = np.array([[100.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        nodes, weights, point_id = trilinear_contributions(pts, SMALL)
        assert set(point_id.tolist()) == {1}


class TestVoxelizeTrilinear:
    def test_mass_conservation(self):
        rng = np.random.default_rng(11)
        pts = random_points(rng, 5000)
        tensor = voxelize_trilinear(pts, SMALL)
        assert tensor.values.shape == (8, 16, 16)
        assert float(tensor.values.sum()) == pytest.approx(5000.0, rel=1e-6)

    def test_permutation_bit_identical(self):
        rng = np.random.default_rng(12)
        pts = random_points(rng, 3000)
        base = voxelize_trilinear(pts, SMALL).values
        for trial in range(5):
            perm = rng.permutation(3000)
            shuffled = voxelize_trilinear(pts[perm], SMALL).values
            assert np.array_equal(base, shuffled)
            assert base.tobytes() == shuffled.tobytes()

    def test_intensity_column_is_ignored(self):
        rng = np.random.default_rng(13)
        pts = random_points(rng, 100)
        with_intensity = np.column_stack([pts, rng.uniform(0, 1, 100)])
        a = voxelize_trilinear(pts, SMALL).values
        b = voxelize_trilinear(with_intensity, SMALL).values
        assert np.array_equal(a, b)

    def test_empty_input(self):
        tensor = voxelize_trilinear(np.zeros((0, 3)), SMALL)
        assert float(tensor.values.sum()) == 0.0

    def test_boundary_cell_keeps_full_mass(self):
        # last-cell points clamp their upper node instead of spilling out
        pts = np.array([[7.9, 3.9, 1.9]])
        tensor = voxelize_trilinear(pts, SMALL)
        assert float(tensor.values.sum()) == pytest.approx(1.0, rel=1e-6)


class TestBevTensor:
    def test_shape_validation(self):
        with pytest.raises(ConfigError):
            BevTensor(np.zeros((1, 2, 3)), SMALL)

    def test_rejects_non_finite(self):
        bad = np.zeros((8, 16, 16))
        bad[0, 0, 0] = np.inf
        with pytest.raises(ConfigError):
            BevTensor(bad, SMALL)
