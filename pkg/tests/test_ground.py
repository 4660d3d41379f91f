"""Ground height estimation, fill behavior, and ground-relative transforms."""

from __future__ import annotations

import json

import numpy as np
import pytest

from bevfuse.errors import ConfigError, ParseError
from bevfuse.geometry import Box3D
from bevfuse.ground import (
    GroundHeightMap,
    estimate_ground_baseline,
    make_ground_relative,
    read_ground_map,
    restore_ground_height,
    write_ground_map,
)
from bevfuse.voxelize import VoxelGridConfig

# 5x5 BEV cells with 1 m edges keeps indices easy to reason about.
GRID = VoxelGridConfig(x_range=(0, 5), y_range=(0, 5), z_range=(-3, 3), resolution=(5, 5, 4))


def cell_center_points(z_fn):
    pts = []
    for iy in range(5):
        for ix in range(5):
            x, y = ix + 0.5, iy + 0.5
            pts.append([x, y, z_fn(x, y)])
    return np.array(pts)


class TestEstimate:
    def test_flat_plane_recovered_exactly(self):
        points = cell_center_points(lambda x, y: -1.6)
        ground = estimate_ground_baseline(points, GRID)
        assert ground.heights.shape == (5, 5)
        assert np.all(ground.heights == np.float32(-1.6))
        assert ground.valid.all()
        assert ground.coverage == 1.0

    def test_tilted_plane_at_cell_centers(self):
        # one point per cell, no neighborhood pooling: the percentile of a
        # single sample is that sample
        points = cell_center_points(lambda x, y: 0.1 * x + 0.2 * y)
        ground = estimate_ground_baseline(points, GRID, neighborhood=0)
        for iy in range(5):
            for ix in range(5):
                want = 0.1 * (ix + 0.5) + 0.2 * (iy + 0.5)
                assert ground.heights[iy, ix] == pytest.approx(want, abs=1e-6)

    def test_low_percentile_ignores_overhead_structure(self):
        # 95 returns from the road surface, 5 from an obstacle above it
        rng = np.random.default_rng(50)
        n = 100
        z = np.zeros(n)
        z[:5] = 2.0
        rng.shuffle(z)
        points = np.column_stack([np.full(n, 0.5), np.full(n, 0.5), z])
        ground = estimate_ground_baseline(points, GRID, neighborhood=0)
        assert ground.heights[0, 0] == 0.0

    def test_percentile_matches_numpy_linear_method(self):
        rng = np.random.default_rng(51)
        z = rng.normal(-1.5, 0.3, 37)
        points = np.column_stack([np.full(37, 2.5), np.full(37, 2.5), z])
        for pct in (5.0, 30.0, 50.0, 95.0):
            ground = estimate_ground_baseline(points, GRID, percentile=pct, neighborhood=0)
            assert ground.heights[2, 2] == pytest.approx(np.percentile(z, pct), abs=1e-6)

    def test_neighborhood_spreads_validity(self):
        points = np.array([[2.5, 2.5, -1.0]])
        ground = estimate_ground_baseline(points, GRID, neighborhood=1)
        # the single point covers its 3x3 neighborhood and nothing else
        want = np.zeros((5, 5), dtype=bool)
        want[1:4, 1:4] = True
        assert np.array_equal(ground.valid, want)

    def test_fill_copies_single_valid_cell_everywhere(self):
        points = np.array([[0.5, 0.5, -1.25]])
        ground = estimate_ground_baseline(points, GRID, neighborhood=0)
        assert np.all(ground.heights == np.float32(-1.25))
        assert ground.coverage == pytest.approx(1 / 25)

    def test_fill_donor_priority_row_above_wins(self):
        # seeds at [row 0, col 2] (z=1) and [row 2, col 0] (z=2); the cell
        # [1, 1] sits at taxicab distance 2 from both and must take the value
        # arriving through its row-above neighbor
        points = np.array([[2.5, 0.5, 1.0], [0.5, 2.5, 2.0]])
        ground = estimate_ground_baseline(points, GRID, neighborhood=0)
        assert ground.heights[0, 2] == 1.0
        assert ground.heights[2, 0] == 2.0
        assert ground.heights[1, 1] == 1.0
        assert ground.heights[2, 2] == 1.0

    def test_no_points_yields_invalid_zero_map(self):
        for points in (np.zeros((0, 3)), np.array([[99.0, 99.0, 0.0]])):
            ground = estimate_ground_baseline(points, GRID)
            assert not ground.valid.any()
            assert np.all(ground.heights == 0.0)
            assert ground.coverage == 0.0

    def test_parameter_validation(self):
        points = np.zeros((1, 3))
        with pytest.raises(ConfigError):
            estimate_ground_baseline(points, GRID, percentile=101.0)
        with pytest.raises(ConfigError):
            estimate_ground_baseline(points, GRID, neighborhood=-1)
        with pytest.raises(ConfigError):
            estimate_ground_baseline(np.zeros((4, 2)), GRID)

    def test_map_shape_validation(self):
        with pytest.raises(ConfigError):
            GroundHeightMap(np.zeros((4, 5), np.float32), np.zeros((5, 5), bool), GRID)


class TestGroundRelative:
    def make_map(self):
        return estimate_ground_baseline(cell_center_points(lambda x, y: 0.3 * x - 1.8), GRID, neighborhood=0)

    def test_subtract_and_mask(self):
        ground = self.make_map()
        points = np.array([[1.5, 1.5, 0.0, 0.75], [9.0, 1.0, 0.0, 0.25]])
        out, ok = make_ground_relative(points, ground)
        assert ok.tolist() == [True, False]
        assert out[0, 2] == pytest.approx(0.0 - float(ground.heights[1, 1]))
        # off-grid point and all extra columns pass through untouched
        assert np.array_equal(out[1], points[1])
        assert out[0, 3] == 0.75

    def test_restore_is_exact_inverse_at_same_cell(self):
        ground = self.make_map()
        rng = np.random.default_rng(52)
        boxes = [
            Box3D(rng.uniform(0.2, 4.8), rng.uniform(0.2, 4.8), rng.uniform(-1, 1),
                  1.5, 3.0, 1.4, rng.uniform(-3, 3))
            for _ in range(20)
        ]
        centers = np.array([[b.x, b.y, b.z] for b in boxes])
        rel, ok = make_ground_relative(centers, ground)
        assert ok.all()
        rel_boxes = [Box3D(b.x, b.y, rel[i, 2], b.w, b.l, b.h, b.yaw) for i, b in enumerate(boxes)]
        restored, ok2 = restore_ground_height(rel_boxes, ground)
        assert ok2.all()
        for orig, back in zip(boxes, restored):
            # same float32 height subtracted and added: only the final sum
            # can round, so agreement holds to a couple of ulps
            assert back.z == pytest.approx(orig.z, abs=1e-12)
            assert (back.x, back.y, back.yaw) == (orig.x, orig.y, orig.yaw)

    def test_restore_leaves_outside_boxes_alone(self):
        ground = self.make_map()
        box = Box3D(40.0, 0.0, -1.0, 1.0, 2.0, 1.0, 0.0)
        restored, ok = restore_ground_height([box], ground)
        assert not ok[0]
        assert restored[0].z == -1.0

    def test_restore_empty(self):
        restored, ok = restore_ground_height([], self.make_map())
        assert restored == []
        assert ok.shape == (0,)


class TestGroundIO:
    def test_roundtrip(self, tmp_path):
        ground = estimate_ground_baseline(cell_center_points(lambda x, y: 0.05 * y - 1.7), GRID)
        write_ground_map(tmp_path / "ground", ground)
        back = read_ground_map(tmp_path / "ground")
        assert np.array_equal(back.heights, ground.heights)
        assert np.array_equal(back.valid, ground.valid)
        assert back.grid == GRID

    def test_missing_grid_key(self, tmp_path):
        ground = estimate_ground_baseline(cell_center_points(lambda x, y: -1.6), GRID)
        write_ground_map(tmp_path / "ground", ground)
        sidecar = tmp_path / "ground.json"
        meta = json.loads(sidecar.read_text())
        del meta["grid"]
        sidecar.write_text(json.dumps(meta))
        with pytest.raises(ParseError) as err:
            read_ground_map(tmp_path / "ground")
        assert "grid" in str(err.value)
