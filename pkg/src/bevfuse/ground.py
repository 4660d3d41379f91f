"""Ground height estimation over the BEV grid and ground-relative coordinates.

The baseline estimator assigns every BEV cell a robust low percentile of the
point heights gathered from the cell's (2r+1) x (2r+1) neighborhood; cells
whose neighborhood holds no points are invalid and are back-filled from the
nearest valid cell by Manhattan distance.  The fill propagates as a
multi-source 4-connected wavefront; when several filled neighbors compete for
a cell the donor is chosen by a fixed priority (row above, column left,
column right, row below), which makes the result deterministic and keeps the
value equal to one of the minimum-distance valid cells.

Ground arithmetic is judged on (x, y) only: the height map is 2D, so the
z-range of the grid never gates subtraction or restoration.

Any callable with the :data:`GroundEstimator` signature (points, grid) ->
GroundHeightMap can replace the baseline, e.g. a learned height predictor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ParseError
from .geometry import Box3D
from .tensorio import read_mask, read_tensor, write_mask, write_tensor
from .voxelize import VoxelGridConfig

__all__ = [
    "GroundHeightMap",
    "GroundEstimator",
    "estimate_ground_baseline",
    "make_ground_relative",
    "restore_ground_height",
    "write_ground_map",
    "read_ground_map",
]

logger = logging.getLogger(__name__)

_AXIS_ORDER = ["row_y", "col_x"]


@dataclass(frozen=True)
class GroundHeightMap:
    """Per-BEV-cell ground height (float32) plus an estimate-validity mask.

    ``heights`` is (ny, nx) indexed [row_y, col_x]; ``valid`` marks cells
    whose height came from data rather than fill (an all-False mask means
    the estimator saw no usable points).
    """

    heights: np.ndarray
    valid: np.ndarray
    grid: VoxelGridConfig

    def __post_init__(self):
        heights = np.asarray(self.heights, dtype=np.float32)
        valid = np.asarray(self.valid, dtype=bool)
        expected = (self.grid.ny, self.grid.nx)
        if heights.shape != expected or valid.shape != expected:
            raise ConfigError(
                f"ground map shapes {heights.shape}/{valid.shape} do not match grid {expected}"
            )
        if not np.all(np.isfinite(heights)):
            raise ConfigError("ground heights must be finite")
        heights.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "heights", heights)
        object.__setattr__(self, "valid", valid)

    @property
    def coverage(self):
        """Fraction of cells whose height is an actual estimate."""
        return float(self.valid.mean())


GroundEstimator = Callable[[np.ndarray, VoxelGridConfig], GroundHeightMap]


def _cells_2d(points, grid):
    """2D cell index and (x, y)-in-bounds mask for (N, 3+) points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ConfigError(f"points must be (N, 3+), got shape {pts.shape}")
    ex, ey, _ = grid.edges
    with np.errstate(invalid="ignore"):
        ok = (
            (pts[:, 0] >= grid.x_range[0])
            & (pts[:, 0] < grid.x_range[1])
            & (pts[:, 1] >= grid.y_range[0])
            & (pts[:, 1] < grid.y_range[1])
        )
        ix = np.floor((pts[:, 0] - grid.x_range[0]) / ex).astype(np.int64)
        iy = np.floor((pts[:, 1] - grid.y_range[0]) / ey).astype(np.int64)
    ix = np.clip(ix, 0, grid.nx - 1)
    iy = np.clip(iy, 0, grid.ny - 1)
    return ix, iy, ok


def _segment_percentile(targets, values, percentile):
    """Linear-interpolation percentile per target segment.

    Matches numpy's default percentile method on each group.  Returns
    (unique_targets, percentile_values).
    """
    order = np.lexsort((values, targets))
    tgt = targets[order]
    val = values[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(tgt)) + 1))
    lengths = np.diff(np.concatenate((starts, [tgt.size])))
    q = percentile / 100.0 * (lengths - 1)
    lo = np.floor(q).astype(np.int64)
    frac = q - lo
    lo_idx = starts + lo
    hi_idx = np.minimum(lo_idx + 1, starts + lengths - 1)
    return tgt[starts], val[lo_idx] * (1.0 - frac) + val[hi_idx] * frac


def _fill_invalid(heights, valid):
    """Back-fill invalid cells from the nearest valid cell (taxicab metric).

    Wavefront fill; donor priority at equal distance is row-above,
    col-left, col-right, row-below.  Mutates and returns ``heights``.
    """
    filled = valid.copy()
    while not filled.all():
        prev_filled = filled.copy()
        prev_heights = heights.copy()
        updated = np.zeros_like(filled)
        # (source slice -> target slice) per direction, priority order.
        shifts = (
            (np.s_[:-1, :], np.s_[1:, :]),   # from row above
            (np.s_[:, :-1], np.s_[:, 1:]),   # from column left
            (np.s_[:, 1:], np.s_[:, :-1]),   # from column right
            (np.s_[1:, :], np.s_[:-1, :]),   # from row below
        )
        for src, dst in shifts:
            take = np.zeros_like(filled)
            take[dst] = prev_filled[src]
            take &= ~prev_filled & ~updated
            if np.any(take):
                donor = np.zeros_like(heights)
                donor[dst] = prev_heights[src]
                heights[take] = donor[take]
                updated |= take
        if not updated.any():
            break  # unreachable cells (no valid cell at all)
        filled |= updated
    return heights


def estimate_ground_baseline(
    points,
    grid: VoxelGridConfig = VoxelGridConfig(),
    percentile: float = 5.0,
    neighborhood: int = 1,
) -> GroundHeightMap:
    """Percentile-of-neighborhood ground height over the BEV grid.

    Every point whose (x, y) lies in the grid contributes its z to all cells
    within Chebyshev radius ``neighborhood`` of its own cell.  Each covered
    cell takes the ``percentile`` (numpy linear interpolation) of its
    gathered heights.  Cells with no contributions are filled from the
    nearest valid cell; with no valid cells at all the map is zero-filled
    and flagged entirely invalid.
    """
    if not 0.0 <= percentile <= 100.0:
        raise ConfigError(f"percentile must be in [0, 100], got {percentile}")
    if neighborhood < 0:
        raise ConfigError(f"neighborhood must be >= 0, got {neighborhood}")

    ix, iy, ok = _cells_2d(points, grid)
    ix, iy = ix[ok], iy[ok]
    z = np.asarray(points, dtype=np.float64)[ok, 2]

    ny, nx = grid.ny, grid.nx
    heights = np.zeros((ny, nx))
    valid = np.zeros((ny, nx), dtype=bool)

    if ix.size:
        span = np.arange(-neighborhood, neighborhood + 1)
        off_x, off_y = np.meshgrid(span, span, indexing="ij")
        off_x = off_x.reshape(-1)
        off_y = off_y.reshape(-1)
        tx = (ix[None, :] + off_x[:, None]).reshape(-1)
        ty = (iy[None, :] + off_y[:, None]).reshape(-1)
        tz = np.broadcast_to(z, (off_x.size, z.size)).reshape(-1)
        keep = (tx >= 0) & (tx < nx) & (ty >= 0) & (ty < ny)
        flat = ty[keep] * nx + tx[keep]
        cells, values = _segment_percentile(flat, tz[keep], percentile)
        heights.reshape(-1)[cells] = values
        valid.reshape(-1)[cells] = True

    if not valid.any():
        logger.warning("ground estimation saw no in-bounds points; returning zero map")
        return GroundHeightMap(np.zeros((ny, nx), dtype=np.float32), valid, grid)

    heights = _fill_invalid(heights, valid)
    return GroundHeightMap(heights.astype(np.float32), valid, grid)


def make_ground_relative(points, ground: GroundHeightMap):
    """Subtract the per-cell ground height from each point's z.

    Returns ``(points_out, adjusted)``.  Points whose (x, y) falls outside
    the grid pass through unchanged and are marked False in ``adjusted``.
    Extra columns beyond x, y, z (e.g. intensity) are preserved.
    """
    pts = np.array(points, dtype=np.float64)
    ix, iy, ok = _cells_2d(pts, ground.grid)
    pts[ok, 2] -= ground.heights[iy[ok], ix[ok]].astype(np.float64)
    return pts, ok


def restore_ground_height(boxes, ground: GroundHeightMap):
    """Add the ground height back to box centers (inverse of the subtract).

    ``boxes`` is a sequence of ground-relative :class:`Box3D`.  Returns
    ``(restored_boxes, adjusted)``; boxes whose center (x, y) is off-grid
    pass through unchanged and get False in ``adjusted``.  A box looked up
    at the same cell in both directions has the identical float32 height
    subtracted and added, so the round trip is exact up to one double
    rounding of the sum.
    """
    boxes = list(boxes)
    if not boxes:
        return [], np.zeros(0, dtype=bool)
    centers = np.array([[b.x, b.y, b.z] for b in boxes])
    ix, iy, ok = _cells_2d(centers, ground.grid)
    out = []
    for i, box in enumerate(boxes):
        if ok[i]:
            dz = float(ground.heights[iy[i], ix[i]])
            out.append(Box3D(box.x, box.y, box.z + dz, box.w, box.l, box.h, box.yaw))
        else:
            out.append(box)
    return out, ok


def write_ground_map(stem, ground: GroundHeightMap):
    """Persist heights (float32 raw + sidecar) and validity bitmask."""
    path = write_tensor(stem, ground.heights, _AXIS_ORDER, extra={"grid": ground.grid.to_dict()})
    write_mask(stem, ground.valid)
    return path


def read_ground_map(stem) -> GroundHeightMap:
    values, meta = read_tensor(stem, expect_axis_order=_AXIS_ORDER)
    if "grid" not in meta:
        raise ParseError("sidecar missing key 'grid'", path=str(stem), line=1)
    try:
        grid = VoxelGridConfig.from_dict(meta["grid"])
    except ConfigError as exc:
        raise ParseError(f"bad grid config: {exc}", path=str(stem), line=1) from exc
    valid = read_mask(stem, values.shape)
    return GroundHeightMap(values.astype(np.float32), valid, grid)
