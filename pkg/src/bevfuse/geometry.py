"""Coordinate frames, sensor calibration, and point/box projections.

COORDINATE SYSTEM CONVENTIONS
-----------------------------

Ego (LiDAR) frame, right-handed, metric:

    x: forward (direction of travel)
    y: left
    z: up

Camera frame, right-handed, metric:

    x: right in the image
    y: down in the image
    z: forward (optical axis); a point is in front of the camera iff z > 0

Image plane, continuous pixel coordinates:

    x_im: column, increasing rightward
    y_im: row, increasing downward
    projection: x_im = fx * x / z + cx,  y_im = fy * y / z + cy

3D boxes live in the ego frame: ``Box3D`` stores the geometric center
(x, y, z), the size (w, l, h) with length l along the heading direction and
width w across it, and the yaw angle about +z measured from +x toward +y.
Yaw is stored wrapped to [-pi, pi).  Angles are radians everywhere inside the
library; degrees appear only at user-facing boundaries (CLI flags, configs).

The calibration profile maps ego points into the camera: with rotation R,
translation t and optional rectification R0,

    p_cam = R0 @ (R @ p_ego + t)        (R0 = I when absent)

All rotation matrices are validated to be orthonormal with determinant +1
within 1e-6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "Point3D",
    "Box3D",
    "Box2D",
    "OrientedBoxBEV",
    "CalibrationProfile",
    "wrap_angle_pi",
    "wrap_angle_half_pi",
    "rotation_z",
    "transform_to_camera",
    "transform_points_to_camera",
    "transform_points_to_ego",
    "project_to_image",
    "project_points_to_image",
    "unproject_pixel",
    "unproject_pixels",
    "project_box3d_to_image_rect",
    "box3d_to_bev",
]

_TWO_PI = 2.0 * math.pi


def wrap_angle_pi(theta):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    return theta - _TWO_PI * np.floor((theta + math.pi) / _TWO_PI)


def wrap_angle_half_pi(theta):
    """Wrap an angle (scalar or array) into [-pi/2, pi/2).

    Angles that differ by pi describe the same undirected axis; this picks
    the representative used by the box-offset codecs.
    """
    return theta - math.pi * np.floor((theta + 0.5 * math.pi) / math.pi)


def rotation_z(theta):
    """2x2 rotation matrix for an in-plane rotation by ``theta``."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _check_rotation(mat, name):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (3, 3):
        raise ConfigError(f"{name} must be 3x3, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ConfigError(f"{name} has non-finite entries")
    if not np.allclose(mat @ mat.T, np.eye(3), atol=1e-6):
        raise ConfigError(f"{name} is not orthonormal within 1e-6")
    if not math.isclose(float(np.linalg.det(mat)), 1.0, abs_tol=1e-6):
        raise ConfigError(f"{name} must have determinant +1")
    return mat


def _finite(value, name):
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class Point3D:
    """A single point with finite metric coordinates."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, _finite(getattr(self, name), name))

    def as_array(self):
        return np.array([self.x, self.y, self.z])


# Corner sign order for Box3D.corners(): (length, width, height) half-extent
# signs.  Top face counter-clockwise seen from above, then bottom face in the
# same in-plane order.  The order is part of the public contract; projection
# hulls and BEV footprints index into it.
_CORNER_SIGNS = np.array(
    [
        [+1, +1, +1],
        [-1, +1, +1],
        [-1, -1, +1],
        [+1, -1, +1],
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, -1, -1],
        [+1, -1, -1],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in the ego frame.

    ``(x, y, z)`` is the geometric center, ``l`` lies along the heading given
    by ``yaw``, ``w`` across it, ``h`` along +z.  Sizes must be positive and
    finite; ``yaw`` is wrapped to [-pi, pi) on construction.
    """

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("x", "y", "z", "yaw"):
            object.__setattr__(self, name, _finite(getattr(self, name), name))
        for name in ("w", "l", "h"):
            v = _finite(getattr(self, name), name)
            if v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "yaw", float(wrap_angle_pi(self.yaw)))

    @property
    def center(self):
        return np.array([self.x, self.y, self.z])

    def corners(self):
        """The 8 corners, (8, 3), in the fixed ``_CORNER_SIGNS`` order."""
        half = _CORNER_SIGNS * np.array([self.l / 2, self.w / 2, self.h / 2])
        rot = rotation_z(self.yaw)
        out = np.empty((8, 3))
        out[:, :2] = half[:, :2] @ rot.T
        out[:, 0] += self.x
        out[:, 1] += self.y
        out[:, 2] = self.z + half[:, 2]
        return out

    def bev(self):
        return OrientedBoxBEV(self.x, self.y, self.w, self.l, self.yaw)


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned 2D box given by center and positive size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        object.__setattr__(self, "cx", _finite(self.cx, "cx"))
        object.__setattr__(self, "cy", _finite(self.cy, "cy"))
        for name in ("w", "h"):
            v = _finite(getattr(self, name), name)
            if v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)

    @property
    def x_min(self):
        return self.cx - self.w / 2

    @property
    def x_max(self):
        return self.cx + self.w / 2

    @property
    def y_min(self):
        return self.cy - self.h / 2

    @property
    def y_max(self):
        return self.cy + self.h / 2

    @classmethod
    def from_bounds(cls, x_min, y_min, x_max, y_max):
        return cls((x_min + x_max) / 2, (y_min + y_max) / 2, x_max - x_min, y_max - y_min)


@dataclass(frozen=True)
class OrientedBoxBEV:
    """Rotated rectangle in the ego x-y plane (the bird's-eye view)."""

    cx: float
    cy: float
    w: float
    l: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "cx", _finite(self.cx, "cx"))
        object.__setattr__(self, "cy", _finite(self.cy, "cy"))
        for name in ("w", "l"):
            v = _finite(getattr(self, name), name)
            if v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "yaw", float(wrap_angle_pi(_finite(self.yaw, "yaw"))))

    def corners(self):
        """Footprint corners, (4, 2), counter-clockwise.

        Matches the top-face order of ``Box3D.corners()`` projected to the
        plane: (+l/2, +w/2), (-l/2, +w/2), (-l/2, -w/2), (+l/2, -w/2) in the
        box frame, rotated by yaw.
        """
        half = np.array(
            [
                [+self.l / 2, +self.w / 2],
                [-self.l / 2, +self.w / 2],
                [-self.l / 2, -self.w / 2],
                [+self.l / 2, -self.w / 2],
            ]
        )
        return half @ rotation_z(self.yaw).T + np.array([self.cx, self.cy])

    def area(self):
        return self.w * self.l


@dataclass(frozen=True)
class CalibrationProfile:
    """Pinhole intrinsics plus the ego-to-camera rigid transform.

    ``image_size`` is (height, width) in pixels.  ``rectification`` is an
    optional extra rotation applied after the rigid transform (None means
    identity).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple
    rectification: np.ndarray | None = None

    def __post_init__(self):
        for name in ("fx", "fy"):
            v = _finite(getattr(self, name), name)
            if v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "cx", _finite(self.cx, "cx"))
        object.__setattr__(self, "cy", _finite(self.cy, "cy"))

        rot = _check_rotation(self.rotation, "rotation")
        rot.setflags(write=False)
        object.__setattr__(self, "rotation", rot)

        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ConfigError(f"translation must have shape (3,), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ConfigError("translation has non-finite entries")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

        if self.rectification is not None:
            rect = _check_rotation(self.rectification, "rectification")
            rect.setflags(write=False)
            object.__setattr__(self, "rectification", rect)

        h, w = self.image_size
        if int(h) != h or int(w) != w or h <= 0 or w <= 0:
            raise ConfigError(f"image_size must be positive integers, got {self.image_size}")
        object.__setattr__(self, "image_size", (int(h), int(w)))

    @property
    def height(self):
        return self.image_size[0]

    @property
    def width(self):
        return self.image_size[1]

    def camera_rotation(self):
        """The full ego-to-camera rotation including rectification."""
        if self.rectification is None:
            return self.rotation
        return self.rectification @ self.rotation

    @classmethod
    def identity(cls, image_size, fx=1.0, fy=1.0, cx=0.0, cy=0.0):
        """Camera coincident with the ego frame (looking along ego +z).

        Mostly useful in tests; real profiles come from calibration files.
        """
        return cls(fx, fy, cx, cy, np.eye(3), np.zeros(3), image_size)


def transform_to_camera(point: Point3D, calib: CalibrationProfile) -> Point3D:
    """Map a single ego-frame point into the camera frame."""
    p = calib.rotation @ point.as_array() + calib.translation
    if calib.rectification is not None:
        p = calib.rectification @ p
    return Point3D(p[0], p[1], p[2])


def transform_points_to_camera(points, calib: CalibrationProfile):
    """Map (N, 3) ego-frame points into the camera frame."""
    points = np.asarray(points, dtype=np.float64)
    out = points @ calib.rotation.T + calib.translation
    if calib.rectification is not None:
        out = out @ calib.rectification.T
    return out


def transform_points_to_ego(points_cam, calib: CalibrationProfile):
    """Inverse of :func:`transform_points_to_camera`."""
    points_cam = np.asarray(points_cam, dtype=np.float64)
    if calib.rectification is not None:
        points_cam = points_cam @ calib.rectification
    return (points_cam - calib.translation) @ calib.rotation


def project_to_image(point_cam: Point3D, calib: CalibrationProfile):
    """Project a camera-frame point to pixel coordinates.

    Returns ``(x_im, y_im)`` or None when the point is not in front of the
    camera (z <= 0).  No image-bounds check is applied here; callers that
    need one compare against ``calib.image_size``.
    """
    if point_cam.z <= 0:
        return None
    return (
        calib.fx * point_cam.x / point_cam.z + calib.cx,
        calib.fy * point_cam.y / point_cam.z + calib.cy,
    )


def project_points_to_image(points_cam, calib: CalibrationProfile):
    """Vectorized projection of (N, 3) camera-frame points.

    Returns ``(pixels, in_front)`` where pixels is (N, 2) ``(x_im, y_im)``
    and in_front marks z > 0.  Pixel values for points behind the camera are
    NaN.
    """
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        x_im = calib.fx * points_cam[:, 0] / z + calib.cx
        y_im = calib.fy * points_cam[:, 1] / z + calib.cy
    pixels = np.stack([x_im, y_im], axis=1)
    pixels[~in_front] = np.nan
    return pixels, in_front


def unproject_pixel(x_im, y_im, depth, calib: CalibrationProfile) -> Point3D:
    """Invert the pinhole model at a known positive depth (camera frame)."""
    depth = float(depth)
    if not math.isfinite(depth) or depth <= 0:
        raise ConfigError(f"depth must be finite and positive, got {depth!r}")
    return Point3D(
        (float(x_im) - calib.cx) / calib.fx * depth,
        (float(y_im) - calib.cy) / calib.fy * depth,
        depth,
    )


def unproject_pixels(x_im, y_im, depth, calib: CalibrationProfile):
    """Vectorized unprojection; all depths must be positive and finite."""
    x_im = np.asarray(x_im, dtype=np.float64)
    y_im = np.asarray(y_im, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise ConfigError("all depths must be finite and positive")
    return np.stack(
        [
            (x_im - calib.cx) / calib.fx * depth,
            (y_im - calib.cy) / calib.fy * depth,
            depth,
        ],
        axis=-1,
    )


def project_box3d_to_image_rect(box: Box3D, calib: CalibrationProfile):
    """Axis-aligned pixel hull of a 3D box, clipped to the image.

    Corners behind the camera (z_cam <= 0) are dropped before taking the
    hull.  Returns None when no corner is in front of the camera or the
    clipped hull is empty.  The clip region is the valid pixel-center range
    [0, width-1] x [0, height-1].
    """
    corners_cam = transform_points_to_camera(box.corners(), calib)
    pixels, in_front = project_points_to_image(corners_cam, calib)
    if not np.any(in_front):
        return None
    pix = pixels[in_front]
    x_min = max(float(np.min(pix[:, 0])), 0.0)
    y_min = max(float(np.min(pix[:, 1])), 0.0)
    x_max = min(float(np.max(pix[:, 0])), float(calib.width - 1))
    y_max = min(float(np.max(pix[:, 1])), float(calib.height - 1))
    if x_max <= x_min or y_max <= y_min:
        return None
    return Box2D.from_bounds(x_min, y_min, x_max, y_max)


def box3d_to_bev(box: Box3D) -> OrientedBoxBEV:
    """Drop the vertical extent of a 3D box, keeping the oriented footprint."""
    return box.bev()
