"""Orientation-anchored ROI feature extraction and refinement-offset codecs.

A box heading is only defined up to pi here (a footprint is symmetric), so
every box is assigned to one of two orientation anchors, 0 or 90 degrees,
by wrapping its yaw into [-pi/4, 3pi/4): headings in [-pi/4, pi/4) use the
0-degree anchor, the rest the 90-degree anchor.  The wrapped angle is the
*canonical orientation*; the residual relative to the anchor stays in
[-pi/4, pi/4).  Extraction lattices and refinement offsets are expressed in
canonical-orientation axes, which gives every ROI of an anchor the same
feature ordering and keeps sample positions continuous within a band.

Sample lattices are ROIAlign-style: one bilinear sample per bin, at the
centers of an even grid_n x grid_n subdivision of the box, clamp-to-edge at
map borders.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import Box2D, Box3D, OrientedBoxBEV, rotation_z, wrap_angle_half_pi
from .interp import bilinear_gather, bilinear_scatter
from .fusion import FeatureMap

__all__ = [
    "OrientationAnchor",
    "OrientedROI",
    "RoiFeatures",
    "assign_orientation_anchor",
    "canonical_orientation",
    "extract_oriented_roi",
    "extract_axis_aligned_roi",
    "encode_refinement_offsets",
    "decode_refinement_offsets",
]

DEFAULT_GRID_N = 5


class OrientationAnchor(enum.Enum):
    """The two heading anchors; the value is the anchor angle in radians."""

    A0 = 0.0
    A90 = math.pi / 2


def _wrap_band(theta):
    """Wrap an angle into [-pi/4, 3pi/4) (the anchor assignment band)."""
    return theta - math.pi * math.floor((theta + math.pi / 4) / math.pi)


def assign_orientation_anchor(theta):
    """Anchor and residual for a heading.

    Returns ``(anchor, theta_prime)`` with theta_prime in [-pi/4, pi/4)
    relative to the anchor angle.  Periodic in theta with period pi.
    """
    theta = float(theta)
    if not math.isfinite(theta):
        raise ConfigError(f"theta must be finite, got {theta!r}")
    wrapped = _wrap_band(theta)
    if wrapped < math.pi / 4:
        return OrientationAnchor.A0, wrapped
    return OrientationAnchor.A90, wrapped - math.pi / 2


def canonical_orientation(theta):
    """Anchor angle plus residual: the heading wrapped into [-pi/4, 3pi/4)."""
    anchor, residual = assign_orientation_anchor(theta)
    return anchor.value + residual


@dataclass(frozen=True)
class OrientedROI:
    """A BEV box tagged with its orientation anchor and lattice size."""

    box: OrientedBoxBEV
    anchor: OrientationAnchor
    grid_n: int = DEFAULT_GRID_N

    def __post_init__(self):
        if self.grid_n < 1:
            raise ConfigError(f"grid_n must be >= 1, got {self.grid_n}")
        expected, _ = assign_orientation_anchor(self.box.yaw)
        if expected is not self.anchor:
            raise ConfigError(
                f"anchor {self.anchor} inconsistent with box yaw {self.box.yaw} "
                f"(expected {expected})"
            )

    @classmethod
    def from_box(cls, box: OrientedBoxBEV, grid_n: int = DEFAULT_GRID_N):
        anchor, _ = assign_orientation_anchor(box.yaw)
        return cls(box, anchor, grid_n)

    @property
    def theta_prime(self):
        return assign_orientation_anchor(self.box.yaw)[1]


@dataclass(frozen=True)
class RoiFeatures:
    """Extracted (channels, grid_n, grid_n) features with gradient access.

    ``sample_rows``/``sample_cols`` hold the continuous map-cell positions
    that produced each lattice sample (flattened row-major), which is all
    the state the adjoint needs.
    """

    values: np.ndarray
    sample_rows: np.ndarray
    sample_cols: np.ndarray
    map_shape: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1] != values.shape[2]:
            raise ConfigError(f"values must be (channels, n, n), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError("ROI features must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "map_shape", tuple(int(n) for n in self.map_shape))

    @property
    def grid_n(self):
        return self.values.shape[1]

    def grad_wrt_map(self, upstream):
        """Vector-Jacobian product: cotangent of the sampled map values.

        ``upstream`` has the shape of ``values``; the result has shape
        (channels,) + map_shape.
        """
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.values.shape:
            raise ConfigError(
                f"upstream shape {upstream.shape} does not match features {self.values.shape}"
            )
        flat = upstream.reshape(upstream.shape[0], -1)
        return bilinear_scatter(flat, self.sample_rows, self.sample_cols, self.map_shape)


def _lattice_offsets(extent, n):
    """Centers of an even n-way subdivision of [-extent/2, extent/2]."""
    return (np.arange(n) + 0.5) / n * extent - extent / 2


def _sample(fmap: FeatureMap, xs, ys, n):
    rows, cols = fmap.cell_of(xs, ys)
    values = bilinear_gather(fmap.values, rows, cols).reshape(fmap.channels, n, n)
    return RoiFeatures(values, rows, cols, (fmap.rows, fmap.cols))


def extract_oriented_roi(fmap: FeatureMap, roi: OrientedROI) -> RoiFeatures:
    """Bilinear lattice samples of a rotated BEV box, anchor-consistent order.

    Output element (c, a, b) samples channel c at
    ``center + R(phi) @ (u_b, v_a)`` where phi is the box's canonical
    orientation, u spans the length axis and v the width axis.  Positions
    outside the map clamp to the border (documented edge behavior).
    """
    box = roi.box
    phi = canonical_orientation(box.yaw)
    n = roi.grid_n

    center_row, center_col = fmap.cell_of(box.cx, box.cy)
    if not (0 <= center_row <= fmap.rows - 1 and 0 <= center_col <= fmap.cols - 1):
        raise ConfigError(
            f"ROI center ({box.cx}, {box.cy}) lies outside the map georeference"
        )

    u = _lattice_offsets(box.l, n)  # along heading
    v = _lattice_offsets(box.w, n)  # across heading
    uu, vv = np.meshgrid(u, v, indexing="xy")  # element (a, b) -> (u_b, v_a)
    rot = rotation_z(phi)
    xs = box.cx + rot[0, 0] * uu + rot[0, 1] * vv
    ys = box.cy + rot[1, 0] * uu + rot[1, 1] * vv
    return _sample(fmap, xs.reshape(-1), ys.reshape(-1), n)


def extract_axis_aligned_roi(fmap: FeatureMap, rect: Box2D, grid_n: int = DEFAULT_GRID_N) -> RoiFeatures:
    """Bilinear lattice samples of an axis-aligned rect in map units.

    The rect lives in the map's georeferenced coordinates (pixels for image
    maps).  Equivalent to oriented extraction at yaw 0 of a box with length
    rect.w along x and width rect.h along y.
    """
    if grid_n < 1:
        raise ConfigError(f"grid_n must be >= 1, got {grid_n}")
    xs_1d = rect.cx + _lattice_offsets(rect.w, grid_n)
    ys_1d = rect.cy + _lattice_offsets(rect.h, grid_n)
    xx, yy = np.meshgrid(xs_1d, ys_1d, indexing="xy")
    return _sample(fmap, xx.reshape(-1), yy.reshape(-1), grid_n)


def encode_refinement_offsets(detection: Box3D, target: Box3D):
    """Refinement target of ``target`` relative to ``detection``.

    Returns the 7-vector (dx', dy', dz, dlog w, dlog l, dlog h, dtheta):
    the planar center offset rotated by minus the detection's canonical
    orientation (so dx' runs along the detection's length axis), the plain
    height offset, log size ratios, and the yaw difference wrapped to
    [-pi/2, pi/2).
    """
    phi = canonical_orientation(detection.yaw)
    rot = rotation_z(-phi)
    dx = target.x - detection.x
    dy = target.y - detection.y
    return np.array(
        [
            rot[0, 0] * dx + rot[0, 1] * dy,
            rot[1, 0] * dx + rot[1, 1] * dy,
            target.z - detection.z,
            math.log(target.w / detection.w),
            math.log(target.l / detection.l),
            math.log(target.h / detection.h),
            float(wrap_angle_half_pi(target.yaw - detection.yaw)),
        ]
    )


def decode_refinement_offsets(detection: Box3D, offsets) -> Box3D:
    """Apply encoded refinement offsets to a detection (inverse of encode).

    Exact inverse whenever the original yaw difference lay in
    [-pi/2, pi/2); other differences decode to the pi-equivalent heading.
    """
    offsets = np.asarray(offsets, dtype=np.float64).reshape(7)
    if not np.all(np.isfinite(offsets)):
        raise ConfigError("offsets must be finite")
    phi = canonical_orientation(detection.yaw)
    rot = rotation_z(phi)
    dx = rot[0, 0] * offsets[0] + rot[0, 1] * offsets[1]
    dy = rot[1, 0] * offsets[0] + rot[1, 1] * offsets[1]
    return Box3D(
        detection.x + dx,
        detection.y + dy,
        detection.z + offsets[2],
        detection.w * math.exp(offsets[3]),
        detection.l * math.exp(offsets[4]),
        detection.h * math.exp(offsets[5]),
        detection.yaw + offsets[6],
    )
