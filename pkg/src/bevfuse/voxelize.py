"""Occupancy voxelization of ego-frame point clouds into a BEV tensor.

Each in-bounds point spreads unit mass over the 8 surrounding nodes of a
regular lattice by trilinear weights, so the total tensor mass equals the
number of in-bounds points.  Lattice nodes are *cell sample positions*: node
(ix, iy, iz) sits at ``min + i * edge`` along each axis, and the tensor is
laid out ``(channels=z, rows=y, cols=x)``.

A point is in bounds iff ``min <= coord < max`` on every axis.  Points in the
final cell of an axis have their upper interpolation neighbor clamped onto
the last node, so they still deposit full weight.

Accumulation is canonically ordered (contributions sorted by flat node index,
then weight, then segment-summed), which makes the result bit-for-bit
invariant under any permutation of the input points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

__all__ = [
    "VoxelGridConfig",
    "VoxelIndex",
    "BevTensor",
    "point_voxel_index",
    "points_voxel_indices",
    "trilinear_contributions",
    "voxelize_trilinear",
]

_DEF_X = (0.0, 70.0)
_DEF_Y = (-40.0, 40.0)
_DEF_Z = (-3.0, 2.0)
_DEF_RES = (448, 512, 32)


@dataclass(frozen=True)
class VoxelGridConfig:
    """Metric extents and voxel counts of the BEV lattice.

    ``resolution`` is (nx, ny, nz).  The defaults cover 70 m forward and
    40 m to each side with a 0.15625 m edge in x and y.
    """

    x_range: tuple = _DEF_X
    y_range: tuple = _DEF_Y
    z_range: tuple = _DEF_Z
    resolution: tuple = _DEF_RES

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            lo, hi = float(lo), float(hi)
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
                raise ConfigError(f"{name} must be a finite increasing pair, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        res = tuple(int(n) for n in self.resolution)
        if len(res) != 3 or any(n < 1 for n in res):
            raise ConfigError(f"resolution must be three positive counts, got {self.resolution}")
        object.__setattr__(self, "resolution", res)

    @property
    def nx(self):
        return self.resolution[0]

    @property
    def ny(self):
        return self.resolution[1]

    @property
    def nz(self):
        return self.resolution[2]

    @property
    def edges(self):
        """Voxel edge lengths (ex, ey, ez)."""
        return (
            (self.x_range[1] - self.x_range[0]) / self.nx,
            (self.y_range[1] - self.y_range[0]) / self.ny,
            (self.z_range[1] - self.z_range[0]) / self.nz,
        )

    @property
    def mins(self):
        return (self.x_range[0], self.y_range[0], self.z_range[0])

    def cell_samples_xy(self):
        """Sample positions of every BEV cell: xs (nx,), ys (ny,)."""
        ex, ey, _ = self.edges
        xs = self.x_range[0] + ex * np.arange(self.nx)
        ys = self.y_range[0] + ey * np.arange(self.ny)
        return xs, ys

    def to_dict(self):
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "resolution": list(self.resolution),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                x_range=tuple(d["x_range"]),
                y_range=tuple(d["y_range"]),
                z_range=tuple(d["z_range"]),
                resolution=tuple(d["resolution"]),
            )
        except KeyError as exc:
            raise ConfigError(f"grid config missing key {exc}") from exc


class VoxelIndex(NamedTuple):
    ix: int
    iy: int
    iz: int


@dataclass(frozen=True)
class BevTensor:
    """Voxelized occupancy, float32, shape (nz, ny, nx)."""

    values: np.ndarray
    grid: VoxelGridConfig

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        expected = (self.grid.nz, self.grid.ny, self.grid.nx)
        if values.shape != expected:
            raise ConfigError(f"values shape {values.shape} does not match grid {expected}")
        if not np.all(np.isfinite(values)):
            raise ConfigError("BEV tensor has non-finite entries")
        values = values.copy() if values is self.values else values
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape


def _coerce_points(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ConfigError(f"points must be (N, 3+) array-like, got shape {pts.shape}")
    return pts[:, :3]


def points_voxel_indices(points, grid: VoxelGridConfig):
    """Voxel cell index of each point via floor((coord - min) / edge).

    Returns ``(indices (N, 3) int, in_bounds (N,) bool)``.  Indices for
    out-of-bounds points (including NaN coordinates) are undefined and the
    mask must be consulted.
    """
    pts = _coerce_points(points)
    mins = np.array(grid.mins)
    maxs = np.array([grid.x_range[1], grid.y_range[1], grid.z_range[1]])
    edges = np.array(grid.edges)
    res = np.array(grid.resolution)

    with np.errstate(invalid="ignore"):
        in_bounds = np.all((pts >= mins) & (pts < maxs), axis=1)
        idx = np.floor((pts - mins) / edges).astype(np.int64)
    # Guard against (coord - min)/edge rounding up to the cell count for
    # coordinates just under the upper bound.
    idx = np.minimum(np.maximum(idx, 0), res - 1)
    return idx, in_bounds


def point_voxel_index(point, grid: VoxelGridConfig):
    """Cell index of a single point, or None when out of bounds.

    Accepts a ``Point3D`` or any length-3 sequence.  Non-finite coordinates
    raise :class:`ConfigError`.
    """
    if hasattr(point, "as_array"):
        coords = point.as_array()
    else:
        coords = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(coords)):
        raise ConfigError(f"point has non-finite coordinates: {coords}")
    idx, ok = points_voxel_indices(coords.reshape(1, 3), grid)
    if not ok[0]:
        return None
    return VoxelIndex(int(idx[0, 0]), int(idx[0, 1]), int(idx[0, 2]))


def trilinear_contributions(points, grid: VoxelGridConfig):
    """Per-point scatter targets and weights.

    Returns ``(flat_index (K,), weight (K,), point_id (K,))`` where K is
    8 * (number of in-bounds points), flat_index addresses the flattened
    (nz, ny, nx) tensor, and the 8 weights of each point sum to 1.
    """
    pts = _coerce_points(points)
    _, in_bounds = points_voxel_indices(pts, grid)
    point_id = np.nonzero(in_bounds)[0]
    pts = pts[in_bounds]
    n = pts.shape[0]
    nx, ny, nz = grid.resolution
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, np.zeros(0), empty

    mins = np.array(grid.mins)
    edges = np.array(grid.edges)
    res = np.array([nx, ny, nz])

    frac_coord = (pts - mins) / edges
    lo = np.minimum(np.floor(frac_coord).astype(np.int64), res - 1)
    hi = np.minimum(lo + 1, res - 1)
    t = frac_coord - lo  # in [0, 1]

    w_lo = 1.0 - t
    nodes = np.empty((n, 8), dtype=np.int64)
    weights = np.empty((n, 8))
    k = 0
    for bx in (0, 1):
        ix = lo[:, 0] if bx == 0 else hi[:, 0]
        wx = w_lo[:, 0] if bx == 0 else t[:, 0]
        for by in (0, 1):
            iy = lo[:, 1] if by == 0 else hi[:, 1]
            wy = w_lo[:, 1] if by == 0 else t[:, 1]
            for bz in (0, 1):
                iz = lo[:, 2] if bz == 0 else hi[:, 2]
                wz = w_lo[:, 2] if bz == 0 else t[:, 2]
                nodes[:, k] = (iz * ny + iy) * nx + ix
                weights[:, k] = wx * wy * wz
                k += 1
    return (
        nodes.reshape(-1),
        weights.reshape(-1),
        np.repeat(point_id, 8),
    )


def voxelize_trilinear(points, grid: VoxelGridConfig = VoxelGridConfig()) -> BevTensor:
    """Scatter unit point masses onto the lattice with trilinear weights.

    Out-of-bounds and NaN points contribute nothing.  The accumulation order
    is canonical (sorted by node then weight), so any permutation of the
    input produces a bit-identical tensor.
    """
    nodes, weights, _ = trilinear_contributions(points, grid)
    nx, ny, nz = grid.resolution
    flat = np.zeros(nz * ny * nx)
    if nodes.size:
        order = np.lexsort((weights, nodes))
        nodes = nodes[order]
        weights = weights[order]
        boundaries = np.flatnonzero(np.diff(nodes)) + 1
        starts = np.concatenate(([0], boundaries))
        sums = np.add.reduceat(weights, starts)
        flat[nodes[starts]] = sums
    return BevTensor(flat.reshape(nz, ny, nx).astype(np.float32), grid)
