"""Sparse depth images from point clouds, and pseudo-points from dense depth.

A sparse depth image has three channels per pixel: the sub-pixel offsets of
the projected point from the pixel it landed on, and the camera depth scaled
by 1/10 to keep it in a range comparable with the offsets.  Unoccupied
pixels are zero in every channel and False in the occupancy mask.

Projected points compete for a pixel; the winner is the lexicographic
minimum of (z_cam, dx, dy), i.e. the nearest point with a deterministic
tie-break, which makes the image independent of point order.

Dense depth images (e.g. from a depth-completion network) can be turned
into camera-frame pseudo-points on a strided pixel lattice, but only where
the sparse image shows no real return, so real measurements always win.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .geometry import CalibrationProfile, project_points_to_image, transform_points_to_camera, unproject_pixels
from .tensorio import read_mask, read_tensor, write_mask, write_tensor

__all__ = [
    "DEPTH_SCALE",
    "SparseDepthImage",
    "DenseDepthImage",
    "build_sparse_depth_image",
    "densify_pseudo_points",
    "write_sparse_depth",
    "read_sparse_depth",
    "write_dense_depth",
    "read_dense_depth",
]

DEPTH_SCALE = 10.0

_SPARSE_AXES = ["channel_dx_dy_d", "row", "col"]
_DENSE_AXES = ["row", "col"]


@dataclass(frozen=True)
class SparseDepthImage:
    """(dx, dy, depth/10) channels, float64, with an occupancy mask."""

    channels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if channels.ndim != 3 or channels.shape[0] != 3:
            raise ConfigError(f"channels must be (3, H, W), got {channels.shape}")
        if mask.shape != channels.shape[1:]:
            raise ConfigError(f"mask shape {mask.shape} does not match image {channels.shape[1:]}")
        if not np.all(np.isfinite(channels)):
            raise ConfigError("sparse depth channels must be finite")
        if np.any(channels[:, ~mask] != 0.0):
            raise ConfigError("unoccupied pixels must be zero in all channels")
        channels.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "mask", mask)

    @property
    def image_size(self):
        return self.channels.shape[1:]


@dataclass(frozen=True)
class DenseDepthImage:
    """Per-pixel camera depth in meters (float32) plus a validity mask."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float32)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2:
            raise ConfigError(f"depth must be (H, W), got {depth.shape}")
        if valid.shape != depth.shape:
            raise ConfigError(f"valid shape {valid.shape} does not match depth {depth.shape}")
        if not np.all(np.isfinite(depth)):
            raise ConfigError("dense depth must be finite")
        if np.any(depth[valid] <= 0):
            raise ConfigError("valid dense depth values must be positive")
        depth.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def image_size(self):
        return self.depth.shape


def _round_half_away(x):
    # round half away from zero, e.g. 2.5 -> 3, -2.5 -> -3
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def build_sparse_depth_image(points, calib: CalibrationProfile) -> SparseDepthImage:
    """Project ego-frame points into the image and rasterize depth.

    Points behind the camera or projecting outside the pixel grid are
    skipped.  Each surviving point lands on its nearest pixel (round half
    away from zero); pixel collisions keep the lexicographic minimum of
    (z_cam, dx, dy).
    """
    h, w = calib.image_size
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ConfigError(f"points must be (N, 3+), got shape {pts.shape}")
    channels = np.zeros((3, h, w))
    mask = np.zeros((h, w), dtype=bool)
    if pts.shape[0] == 0:
        return SparseDepthImage(channels, mask)

    cam = transform_points_to_camera(pts[:, :3], calib)
    pixels, in_front = project_points_to_image(cam, calib)
    z = cam[:, 2]

    u = _round_half_away(pixels[:, 0])
    v = _round_half_away(pixels[:, 1])
    with np.errstate(invalid="ignore"):
        ok = in_front & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    if not np.any(ok):
        return SparseDepthImage(channels, mask)

    u = u[ok].astype(np.int64)
    v = v[ok].astype(np.int64)
    z = z[ok]
    dx = pixels[ok, 0] - u
    dy = pixels[ok, 1] - v

    pix = v * w + u
    order = np.lexsort((dy, dx, z, pix))
    pix, z, dx, dy, u, v = pix[order], z[order], dx[order], dy[order], u[order], v[order]
    first = np.concatenate(([True], np.diff(pix) != 0))

    vv, uu = v[first], u[first]
    channels[0, vv, uu] = dx[first]
    channels[1, vv, uu] = dy[first]
    channels[2, vv, uu] = z[first] / DEPTH_SCALE
    mask[vv, uu] = True
    return SparseDepthImage(channels, mask)


def densify_pseudo_points(
    dense: DenseDepthImage,
    sparse: SparseDepthImage,
    calib: CalibrationProfile,
    stride: int = 4,
):
    """Camera-frame pseudo-points from dense depth where no real return exists.

    Samples the pixel lattice at every ``stride``-th row and column; a pixel
    yields a point iff its dense depth is valid and the sparse image shows
    no true point there.  Returns (M, 3) camera-frame points in row-major
    pixel order.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if dense.image_size != sparse.image_size:
        raise ConfigError(
            f"dense depth {dense.image_size} does not match sparse image {sparse.image_size}"
        )
    if dense.image_size != calib.image_size:
        raise ConfigError(
            f"dense depth {dense.image_size} does not match calibration image {calib.image_size}"
        )
    h, w = dense.image_size
    vs = np.arange(0, h, stride)
    us = np.arange(0, w, stride)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    vv = vv.reshape(-1)
    uu = uu.reshape(-1)
    take = dense.valid[vv, uu] & ~sparse.mask[vv, uu]
    vv, uu = vv[take], uu[take]
    if vv.size == 0:
        return np.zeros((0, 3))
    depth = dense.depth[vv, uu].astype(np.float64)
    return unproject_pixels(uu.astype(np.float64), vv.astype(np.float64), depth, calib)


def write_sparse_depth(stem, image: SparseDepthImage):
    """Raw float64 channels plus occupancy bitmask (lossless round-trip)."""
    path = write_tensor(stem, image.channels, _SPARSE_AXES)
    write_mask(stem, image.mask)
    return path


def read_sparse_depth(stem) -> SparseDepthImage:
    values, _ = read_tensor(stem, expect_axis_order=_SPARSE_AXES)
    mask = read_mask(stem, values.shape[1:])
    return SparseDepthImage(values, mask)


def write_dense_depth(stem, image: DenseDepthImage):
    """Raw float32 depth; invalid pixels are stored as 0."""
    depth = np.where(image.valid, image.depth, np.float32(0.0))
    path = write_tensor(stem, depth, _DENSE_AXES, extra={"convention": "zero_invalid"})
    return path


def read_dense_depth(path) -> DenseDepthImage:
    """Read dense depth from raw+sidecar files or a 16-bit PNG.

    PNG values encode meters * 256 (a common depth-map convention); zero
    means invalid in both formats.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image

            with Image.open(path) as img:
                arr = np.asarray(img)
        except Exception as exc:
            raise ParseError(f"cannot decode PNG: {exc}", path=str(path)) from exc
        if arr.ndim != 2:
            raise ParseError(f"depth PNG must be single-channel, got shape {arr.shape}", path=str(path))
        if arr.dtype not in (np.uint16, np.int32, np.uint8):
            raise ParseError(f"unsupported PNG pixel type {arr.dtype}", path=str(path))
        depth = arr.astype(np.float64) / 256.0
        return DenseDepthImage(depth.astype(np.float32), arr > 0)
    values, _ = read_tensor(path, expect_axis_order=_DENSE_AXES)
    if np.any(values < 0):
        raise ParseError("dense depth contains negative values", path=str(path))
    return DenseDepthImage(values.astype(np.float32), values > 0)
