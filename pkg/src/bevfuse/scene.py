"""Synthetic frame generation and augmentation.

A scene is a tilted-or-flat ground plane plus non-overlapping upright
boxes.  LiDAR points are sampled on the ground and on box surfaces, the
dense depth image is rendered by per-pixel ray casting against the same
geometry, and labels are derived by projection.  Everything is a pure
function of the spec seed: coordinates are quantized to float32 and label
floats to 6 decimals so that frames survive save/load byte-identically.

The default camera sits at the ego origin looking along +x (ego y maps to
image left, ego z to image up); the ground plane defaults to 1.6 m below
the sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .depthmap import DenseDepthImage
from .errors import ConfigError, GenerationError
from .evaluation import GroundTruthObject
from .geometry import (
    Box2D,
    Box3D,
    CalibrationProfile,
    project_box3d_to_image_rect,
    project_points_to_image,
    rotation_z,
    transform_points_to_camera,
    wrap_angle_pi,
)
from .iou import rotated_iou_bev
from .kitti_io import (
    DEFAULT_CLASS_IDS,
    LabelRecord,
    read_calibration,
    read_labels,
    read_point_cloud,
    write_calibration,
    write_labels,
    write_point_cloud,
)

__all__ = [
    "YAW_LIMIT",
    "Frame",
    "SceneSpec",
    "default_camera",
    "render_depth",
    "synth_scene",
    "augment_frame",
    "save_frame",
    "load_frame",
]

# largest 6-decimal yaw that stays strictly inside [-pi, pi) after reparsing
YAW_LIMIT = 3.141592

CLASS_NAMES = {v: k for k, v in DEFAULT_CLASS_IDS.items()}

_PLACEHOLDER_RECT = Box2D.from_bounds(0.0, 0.0, 1.0, 1.0)


def round6_yaw(theta):
    """Wrap to [-pi, pi) and round to 6 decimals without leaving the band."""
    v = round(wrap_angle_pi(float(theta)), 6)
    return min(max(v, -YAW_LIMIT), YAW_LIMIT)


def _rotation_z3(theta):
    """3x3 up-axis rotation (the shared helper is the in-plane 2x2)."""
    rot = np.eye(3)
    rot[:2, :2] = rotation_z(theta)
    return rot


@dataclass(frozen=True)
class Frame:
    """One unit of data: points, calibration, labels, optional dense depth."""

    points: np.ndarray
    calib: CalibrationProfile
    labels: tuple
    dense_depth: DenseDepthImage | None = None
    frame_id: str = "frame"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ConfigError(f"points must be (N, 4), got {pts.shape}")
        if pts.size and not np.all(np.isfinite(pts)):
            raise ConfigError("points must be finite")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(self.labels))
        for gt in self.labels:
            if not isinstance(gt, GroundTruthObject):
                raise ConfigError(f"labels must be GroundTruthObject, got {type(gt)!r}")
        if self.dense_depth is not None:
            if self.dense_depth.image_size != self.calib.image_size:
                raise ConfigError(
                    f"dense depth size {self.dense_depth.image_size} does not match "
                    f"calib image_size {self.calib.image_size}"
                )
        object.__setattr__(self, "frame_id", str(self.frame_id))

    @property
    def xyz(self):
        return self.points[:, :3]


def default_camera(image_size=(192, 640)) -> CalibrationProfile:
    """Forward-looking camera at the ego origin (image x = -ego y, image y = -ego z)."""
    h, w = image_size
    rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return CalibrationProfile(
        fx=320.0,
        fy=320.0,
        cx=(w - 1) / 2.0,
        cy=(h - 1) / 2.0,
        rotation=rot,
        translation=np.zeros(3),
        image_size=(int(h), int(w)),
    )


def _range2(value, name, lo_ok=None):
    lo, hi = float(value[0]), float(value[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ConfigError(f"{name} must be a finite (lo, hi) range, got {value!r}")
    if lo_ok is not None and lo < lo_ok:
        raise ConfigError(f"{name} must start at {lo_ok} or above, got {lo}")
    return (lo, hi)


@dataclass(frozen=True)
class SceneSpec:
    """Distribution parameters for one synthetic frame.

    ``ground`` is the plane z = a*x + b*y + c.  ``near_boxes`` of the boxes
    are forced into the ``near_x`` depth band so that some objects are tall
    enough in the image to be counted by every difficulty tier.
    """

    seed: int = 0
    n_boxes: tuple = (2, 4)
    near_boxes: int = 2
    near_x: tuple = (8.0, 16.0)
    far_x: tuple = (8.0, 40.0)
    y_fraction: float = 0.5
    width_range: tuple = (1.6, 1.9)
    length_range: tuple = (3.5, 4.5)
    height_range: tuple = (1.4, 1.7)
    ground: tuple = (0.0, 0.0, -1.6)
    ground_noise: float = 0.02
    ground_extent: tuple = ((0.0, 70.0), (-40.0, 40.0))
    points_per_m2_ground: float = 0.6
    points_per_m2_surface: float = 12.0
    max_retries: int = 100
    image_size: tuple = (192, 640)
    frame_id: str | None = None

    def __post_init__(self):
        nmin, nmax = int(self.n_boxes[0]), int(self.n_boxes[1])
        if nmin < 0 or nmin > nmax:
            raise ConfigError(f"n_boxes must satisfy 0 <= min <= max, got {self.n_boxes!r}")
        object.__setattr__(self, "n_boxes", (nmin, nmax))
        if int(self.near_boxes) < 0:
            raise ConfigError("near_boxes must be >= 0")
        object.__setattr__(self, "near_boxes", int(self.near_boxes))
        object.__setattr__(self, "near_x", _range2(self.near_x, "near_x", lo_ok=0.5))
        object.__setattr__(self, "far_x", _range2(self.far_x, "far_x", lo_ok=0.5))
        for name in ("width_range", "length_range", "height_range"):
            rng = _range2(getattr(self, name), name)
            if rng[0] <= 0:
                raise ConfigError(f"{name} must be positive, got {rng!r}")
            object.__setattr__(self, name, rng)
        if not 0.0 < float(self.y_fraction) <= 1.0:
            raise ConfigError(f"y_fraction must be in (0, 1], got {self.y_fraction}")
        a, b, c = (float(v) for v in self.ground)
        if not all(math.isfinite(v) for v in (a, b, c)):
            raise ConfigError("ground plane parameters must be finite")
        object.__setattr__(self, "ground", (a, b, c))
        if not float(self.ground_noise) >= 0.0:
            raise ConfigError("ground_noise must be >= 0")
        xr = _range2(self.ground_extent[0], "ground_extent[0]")
        yr = _range2(self.ground_extent[1], "ground_extent[1]")
        object.__setattr__(self, "ground_extent", (xr, yr))
        for name in ("points_per_m2_ground", "points_per_m2_surface"):
            if not float(getattr(self, name)) > 0.0:
                raise ConfigError(f"{name} must be positive")
        if int(self.max_retries) < 1:
            raise ConfigError("max_retries must be >= 1")

    def ground_height(self, x, y):
        a, b, c = self.ground
        return a * np.asarray(x, dtype=np.float64) + b * np.asarray(y, dtype=np.float64) + c


def _sample_box(rng, spec: SceneSpec, near: bool) -> Box3D:
    x_lo, x_hi = spec.near_x if near else spec.far_x
    x = rng.uniform(x_lo, x_hi)
    span = spec.y_fraction * x
    y = rng.uniform(-span, span)
    w = rng.uniform(*spec.width_range)
    l = rng.uniform(*spec.length_range)
    h = rng.uniform(*spec.height_range)
    yaw = rng.uniform(-math.pi, math.pi)
    x, y, w, l, h = (round(v, 6) for v in (x, y, w, l, h))
    z = round(float(spec.ground_height(x, y)) + h / 2.0, 6)
    return Box3D(x, y, z, w, l, h, round6_yaw(yaw))


def _derive_label(box: Box3D, calib: CalibrationProfile) -> GroundTruthObject:
    """Project the box for its 2D rect and truncation; invisible boxes get
    a 1x1 placeholder rect with truncation 1 so every tier ignores them."""
    rect = project_box3d_to_image_rect(box, calib)
    if rect is None or rect.w < 1e-3 or rect.h < 1e-3:
        return GroundTruthObject(box, _PLACEHOLDER_RECT, truncation=1.0, occlusion=0, class_id=0)
    corners_cam = transform_points_to_camera(box.corners(), calib)
    pixels, in_front = project_points_to_image(corners_cam, calib)
    pix = pixels[in_front]
    full_w = float(np.max(pix[:, 0]) - np.min(pix[:, 0]))
    full_h = float(np.max(pix[:, 1]) - np.min(pix[:, 1]))
    full_area = full_w * full_h
    trunc = 0.0
    if full_area > 0:
        trunc = max(0.0, 1.0 - (rect.w * rect.h) / full_area)
    trunc = min(round(trunc, 6), 1.0)
    rect6 = Box2D.from_bounds(
        round(rect.x_min, 6), round(rect.y_min, 6), round(rect.x_max, 6), round(rect.y_max, 6)
    )
    return GroundTruthObject(box, rect6, truncation=trunc, occlusion=0, class_id=0)


def _surface_points(rng, box: Box3D, density):
    """Uniform samples on all six faces, area-proportional counts."""
    half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0])
    dims = np.array([box.l, box.w, box.h])
    pts = []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        area = dims[u_axis] * dims[v_axis]
        count = int(math.ceil(density * area))
        for sign in (1.0, -1.0):
            local = np.empty((count, 3))
            local[:, axis] = sign * half[axis]
            local[:, u_axis] = rng.uniform(-half[u_axis], half[u_axis], size=count)
            local[:, v_axis] = rng.uniform(-half[v_axis], half[v_axis], size=count)
            pts.append(local)
    local = np.vstack(pts)
    world = local @ _rotation_z3(box.yaw).T + np.array([box.x, box.y, box.z])
    return world


def _ray_directions(calib: CalibrationProfile):
    """Ego-frame unit-z_cam ray directions for every pixel, shape (H, W, 3)."""
    h, w = calib.image_size
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    d_cam = np.stack(
        [(uu - calib.cx) / calib.fx, (vv - calib.cy) / calib.fy, np.ones_like(uu)], axis=-1
    )
    rot = calib.camera_rotation()
    return d_cam @ rot


def render_depth(boxes, ground, calib: CalibrationProfile, max_depth=80.0) -> DenseDepthImage:
    """Ray-cast depth against the ground plane and each box.

    Rays leave the camera center through every pixel; stored depth is
    camera z of the nearest hit.  Pixels with no hit closer than
    ``max_depth`` are invalid.  Camera center must not be on the ground
    plane (the default geometry keeps it 1.6 m above).
    """
    a, b, c = ground
    dirs = _ray_directions(calib)
    h, w = calib.image_size
    d = dirs.reshape(-1, 3)
    # camera center in ego coordinates solves R p + t = 0 (rectification
    # rotates the zero vector to itself)
    origin = -calib.rotation.T @ calib.translation

    depth = np.full(d.shape[0], np.inf)
    denom = d[:, 2] - a * d[:, 0] - b * d[:, 1]
    numer = (a * origin[0] + b * origin[1] + c) - origin[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_ground = numer / denom
    hit = np.isfinite(s_ground) & (s_ground > 0)
    depth[hit] = s_ground[hit]

    big = 1e30
    for box in boxes:
        rot_b = _rotation_z3(box.yaw)
        center = np.array([box.x, box.y, box.z])
        o_b = rot_b.T @ (origin - center)
        d_b = d @ rot_b
        half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0])
        tmin = np.full(d.shape[0], -big)
        tmax = np.full(d.shape[0], big)
        for axis in range(3):
            da = d_b[:, axis]
            oa = o_b[axis]
            small = np.abs(da) < 1e-12
            with np.errstate(divide="ignore"):
                t1 = (-half[axis] - oa) / np.where(small, 1.0, da)
                t2 = (half[axis] - oa) / np.where(small, 1.0, da)
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            inside = np.abs(oa) <= half[axis]
            lo = np.where(small, np.where(inside, -big, big), lo)
            hi = np.where(small, np.where(inside, big, -big), hi)
            tmin = np.maximum(tmin, lo)
            tmax = np.minimum(tmax, hi)
        hit = (tmax >= tmin) & (tmax > 0)
        t_hit = np.where(tmin > 0, tmin, tmax)
        depth = np.where(hit & (t_hit < depth), t_hit, depth)

    valid = np.isfinite(depth) & (depth > 0) & (depth <= max_depth)
    out = np.where(valid, depth, 0.0).reshape(h, w)
    return DenseDepthImage(out.astype(np.float32), valid.reshape(h, w))


def synth_scene(spec: SceneSpec) -> Frame:
    """Generate one deterministic frame from the spec seed.

    Boxes are rejection-sampled until their BEV footprints are disjoint;
    exceeding the retry cap raises GenerationError.  Per-box label values
    are rounded to 6 decimals and point coordinates quantized to float32
    before assembly, so save/load roundtrips are exact.
    """
    rng = np.random.default_rng(spec.seed)
    calib = default_camera(spec.image_size)

    n_min, n_max = spec.n_boxes
    n = int(rng.integers(n_min, n_max + 1))
    boxes = []
    for i in range(n):
        near = i < min(spec.near_boxes, n)
        for _ in range(spec.max_retries):
            cand = _sample_box(rng, spec, near)
            if all(rotated_iou_bev(cand.bev(), other.bev()) <= 0.0 for other in boxes):
                boxes.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place box {i} without overlap after {spec.max_retries} tries"
            )

    (x_lo, x_hi), (y_lo, y_hi) = spec.ground_extent
    area = (x_hi - x_lo) * (y_hi - y_lo)
    n_ground = int(math.ceil(spec.points_per_m2_ground * area))
    gx = rng.uniform(x_lo, x_hi, size=n_ground)
    gy = rng.uniform(y_lo, y_hi, size=n_ground)
    gz = spec.ground_height(gx, gy) + rng.uniform(-spec.ground_noise, spec.ground_noise, n_ground)
    xyz = [np.stack([gx, gy, gz], axis=1)]
    for box in boxes:
        xyz.append(_surface_points(rng, box, spec.points_per_m2_surface))
    xyz = np.vstack(xyz)
    intensity = rng.uniform(0.0, 1.0, size=xyz.shape[0])
    points = np.hstack([xyz, intensity[:, None]]).astype(np.float32).astype(np.float64)

    labels = tuple(_derive_label(box, calib) for box in boxes)
    depth = render_depth(boxes, spec.ground, calib)
    frame_id = spec.frame_id if spec.frame_id is not None else f"synth-{spec.seed:06d}"
    return Frame(points=points, calib=calib, labels=labels, dense_depth=depth, frame_id=frame_id)


def augment_frame(frame: Frame, seed, angle_deg=5.0, translation=1.0, scale_range=(0.95, 1.05)):
    """Apply a seeded global similarity (yaw rotation, horizontal shift, scale).

    Points and 3D labels transform together; 2D labels are re-derived by
    projection.  The dense depth image is carried through unchanged: it is
    a camera-space observation, not re-rendered for the moved world.
    Degenerate ranges (0 / (1, 1)) reproduce the input frame exactly.
    """
    if angle_deg < 0 or translation < 0:
        raise ConfigError("angle_deg and translation must be >= 0")
    s_lo, s_hi = _range2(scale_range, "scale_range", lo_ok=1e-6)
    rng = np.random.default_rng(seed)
    angle = math.radians(rng.uniform(-angle_deg, angle_deg))
    tx = rng.uniform(-translation, translation)
    ty = rng.uniform(-translation, translation)
    scale = rng.uniform(s_lo, s_hi)

    rot = _rotation_z3(angle)
    shift = np.array([tx, ty, 0.0])
    xyz = scale * (frame.xyz @ rot.T) + shift
    points = np.hstack([xyz, frame.points[:, 3:4]]).astype(np.float32).astype(np.float64)

    labels = []
    for gt in frame.labels:
        b = gt.box3d
        center = scale * (rot @ np.array([b.x, b.y, b.z])) + shift
        new_box = Box3D(
            round(center[0], 6),
            round(center[1], 6),
            round(center[2], 6),
            round(scale * b.w, 6),
            round(scale * b.l, 6),
            round(scale * b.h, 6),
            round6_yaw(b.yaw + angle),
        )
        derived = _derive_label(new_box, frame.calib)
        labels.append(replace(derived, occlusion=gt.occlusion, class_id=gt.class_id))
    return Frame(
        points=points,
        calib=frame.calib,
        labels=tuple(labels),
        dense_depth=frame.dense_depth,
        frame_id=frame.frame_id + f"-aug{seed}",
    )


def save_frame(dir_path, frame: Frame):
    """Write points.bin, labels.txt, calib.txt, and dense_depth.* into a directory."""
    from pathlib import Path

    from .depthmap import write_dense_depth

    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    write_point_cloud(d / "points.bin", frame.points)
    records = [
        LabelRecord.from_ground_truth(gt, CLASS_NAMES.get(gt.class_id, str(gt.class_id)))
        for gt in frame.labels
    ]
    write_labels(d / "labels.txt", records)
    write_calibration(d / "calib.txt", frame.calib)
    if frame.dense_depth is not None:
        write_dense_depth(d / "dense_depth", frame.dense_depth)


def load_frame(dir_path, class_ids=DEFAULT_CLASS_IDS) -> Frame:
    """Read a frame directory written by save_frame. frame_id is the dir name."""
    from pathlib import Path

    from .depthmap import read_dense_depth

    d = Path(dir_path)
    points = read_point_cloud(d / "points.bin")
    calib = read_calibration(d / "calib.txt")
    labels = tuple(rec.to_ground_truth(class_ids) for rec in read_labels(d / "labels.txt"))
    depth = None
    if (d / "dense_depth.bin").exists():
        depth = read_dense_depth(d / "dense_depth")
    return Frame(points=points, calib=calib, labels=labels, dense_depth=depth, frame_id=d.name)
