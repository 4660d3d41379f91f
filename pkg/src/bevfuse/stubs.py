"""Deterministic analytic feature maps standing in for trained backbones.

Every channel has a documented closed form so fusion outputs can be
checked end to end without any learned weights.

Image maps (4 channels, strides 4/8/16/32): cell (r, c) at stride s reads
pixel (v, u) = (min(r*s, H-1), min(c*s, W-1)) and stores

* channel 0: dense depth at (v, u) divided by 80, 0 where invalid or absent;
* channel 1: the sparse depth image's scaled-depth channel at (v, u)
  (camera z / 10 at occupied pixels, 0 elsewhere);
* channel 2: sin(0.11 * u) * cos(0.07 * v);
* channel 3: u / (W - 1) - v / (H - 1).

BEV map (6 channels) on the voxel grid's cell sample lattice, cell (r, c)
at (x, y) = (x0 + c*ex, y0 + r*ey) with footprint [x, x+ex) x [y, y+ey):

* channel 0: number of LiDAR points whose x/y falls in the footprint
  (any z);
* channel 1: mean intensity of those points, 0 where empty;
* channel 2: max point z in the footprint, 0 where empty;
* channel 3: sin(0.1 * x);
* channel 4: cos(0.1 * y);
* channel 5: (x - x0) / (x1 - x0) + (y - y0) / (y1 - y0).
"""

from __future__ import annotations

import numpy as np

from .depthmap import build_sparse_depth_image
from .errors import ConfigError
from .fusion import FeatureMap
from .voxelize import VoxelGridConfig

__all__ = [
    "IMAGE_STUB_CHANNELS",
    "BEV_STUB_CHANNELS",
    "DEPTH_NORMALIZER",
    "stub_image_maps",
    "stub_bev_map",
    "stub_feature_maps",
]

IMAGE_STUB_CHANNELS = 4
BEV_STUB_CHANNELS = 6
DEPTH_NORMALIZER = 80.0
DEFAULT_STRIDES = (4, 8, 16, 32)


def stub_image_maps(frame, strides=DEFAULT_STRIDES):
    """Analytic image feature pyramid for a frame, finest stride first."""
    strides = tuple(int(s) for s in strides)
    if not strides or any(s < 1 for s in strides):
        raise ConfigError(f"strides must be positive, got {strides!r}")
    if list(strides) != sorted(set(strides)):
        raise ConfigError(f"strides must be strictly increasing, got {strides!r}")
    h, w = frame.calib.image_size

    depth_norm = np.zeros((h, w))
    if frame.dense_depth is not None:
        d = frame.dense_depth
        depth_norm = np.where(d.valid, d.depth.astype(np.float64) / DEPTH_NORMALIZER, 0.0)
    sparse = build_sparse_depth_image(frame.points[:, :3], frame.calib)
    sparse_z = sparse.channels[2]

    maps = []
    for s in strides:
        rows = -(-h // s)
        cols = -(-w // s)
        v = np.minimum(np.arange(rows) * s, h - 1)
        u = np.minimum(np.arange(cols) * s, w - 1)
        uu = u[None, :].astype(np.float64)
        vv = v[:, None].astype(np.float64)
        ch = np.empty((IMAGE_STUB_CHANNELS, rows, cols))
        ch[0] = depth_norm[np.ix_(v, u)]
        ch[1] = sparse_z[np.ix_(v, u)]
        ch[2] = np.sin(0.11 * uu) * np.cos(0.07 * vv)
        ch[3] = uu / (w - 1) - vv / (h - 1)
        maps.append(FeatureMap(ch.astype(np.float32), stride=float(s)))
    return maps


def stub_bev_map(frame, grid: VoxelGridConfig) -> FeatureMap:
    """Analytic BEV features: occupancy stats plus positional bands."""
    xs, ys = grid.cell_samples_xy()
    ex, ey, _ = grid.edges
    nx, ny = grid.nx, grid.ny

    pts = np.asarray(frame.points, dtype=np.float64)
    ix = np.floor((pts[:, 0] - grid.x_range[0]) / ex).astype(np.int64)
    iy = np.floor((pts[:, 1] - grid.y_range[0]) / ey).astype(np.int64)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    ix, iy = ix[ok], iy[ok]
    z = pts[ok, 2]
    intensity = pts[ok, 3]

    count = np.zeros((ny, nx))
    np.add.at(count, (iy, ix), 1.0)
    inten_sum = np.zeros((ny, nx))
    np.add.at(inten_sum, (iy, ix), intensity)
    zmax = np.full((ny, nx), -np.inf)
    np.maximum.at(zmax, (iy, ix), z)

    occupied = count > 0
    mean_inten = np.where(occupied, inten_sum / np.where(occupied, count, 1.0), 0.0)
    zmax = np.where(occupied, zmax, 0.0)

    xx = xs[None, :]
    yy = ys[:, None]
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    ch = np.empty((BEV_STUB_CHANNELS, ny, nx))
    ch[0] = count
    ch[1] = mean_inten
    ch[2] = zmax
    ch[3] = np.broadcast_to(np.sin(0.1 * xx), (ny, nx))
    ch[4] = np.broadcast_to(np.cos(0.1 * yy), (ny, nx))
    ch[5] = (xx - x0) / (x1 - x0) + (yy - y0) / (y1 - y0)
    return FeatureMap.for_grid(ch.astype(np.float32), grid)


def stub_feature_maps(frame, grid: VoxelGridConfig, strides=DEFAULT_STRIDES):
    """(image pyramid, BEV map) for a frame; same frame gives identical maps."""
    return stub_image_maps(frame, strides), stub_bev_map(frame, grid)
