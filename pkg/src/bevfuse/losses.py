"""First-stage target assignment, box codecs, and detection loss terms.

Cells are positive when their sample position lies inside a ground-truth
BEV footprint, ignored inside the footprint dilated by a margin, negative
otherwise.  Box regression uses the (x, y, z, log w, log l, log h, theta)
parametrization against the matched cell's position; angles are wrapped to
[-pi/2, pi/2), consistent with the pi-periodic orientation anchors.

The total detection loss is

    classification + regression_weight * (box + refine2d + refine3d)
    + depth_weight * depth
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import Box2D, Box3D, wrap_angle_half_pi
from .voxelize import VoxelGridConfig

__all__ = [
    "LABEL_NEGATIVE",
    "LABEL_POSITIVE",
    "LABEL_IGNORE",
    "TargetAssignment",
    "LossWeights",
    "assign_targets",
    "encode_box3d",
    "decode_box3d",
    "encode_box2d",
    "decode_box2d",
    "smooth_l1",
    "smooth_l1_deriv",
    "bce_loss",
    "depth_l2",
    "total_loss",
]

LABEL_NEGATIVE = 0
LABEL_POSITIVE = 1
LABEL_IGNORE = 2

BCE_EPS = 1e-7
DEFAULT_IGNORE_MARGIN = 0.3


@dataclass(frozen=True)
class TargetAssignment:
    """Per-BEV-cell label plus matched GT index (-1 except for positives)."""

    labels: np.ndarray
    matched_gt: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        matched = np.asarray(self.matched_gt, dtype=np.int64)
        if labels.shape != matched.shape or labels.ndim != 2:
            raise ConfigError("labels and matched_gt must be equal 2D shapes")
        if np.any((labels == LABEL_POSITIVE) & (matched < 0)):
            raise ConfigError("every positive cell needs a GT index")
        labels.setflags(write=False)
        matched.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "matched_gt", matched)


@dataclass(frozen=True)
class LossWeights:
    """Non-negative balance weights for the loss terms."""

    regression: float = 1.0
    depth: float = 1.0

    def __post_init__(self):
        for name in ("regression", "depth"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} weight must be non-negative, got {v!r}")
            object.__setattr__(self, name, v)


def _in_footprint(boxes, xs, ys, margin):
    """(n_boxes, n_cells) closed containment tests in dilated footprints."""
    inside = np.empty((len(boxes), xs.size), dtype=bool)
    for i, b in enumerate(boxes):
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        dx = xs - b.x
        dy = ys - b.y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside[i] = (np.abs(u) <= b.l / 2 + margin) & (np.abs(v) <= b.w / 2 + margin)
    return inside


def assign_targets(
    gt_boxes,
    bev_cfg: VoxelGridConfig = VoxelGridConfig(),
    ignore_margin: float = DEFAULT_IGNORE_MARGIN,
) -> TargetAssignment:
    """Label every BEV cell against the ground-truth footprints.

    Containment is closed (boundary counts as inside).  A cell inside
    several footprints matches the box with the nearest center; exact
    distance ties keep the lowest GT index.
    """
    if ignore_margin < 0:
        raise ConfigError(f"ignore_margin must be >= 0, got {ignore_margin}")
    boxes = list(gt_boxes)
    ny, nx = bev_cfg.ny, bev_cfg.nx
    labels = np.full((ny, nx), LABEL_NEGATIVE, dtype=np.int8)
    matched = np.full((ny, nx), -1, dtype=np.int64)
    if not boxes:
        return TargetAssignment(labels, matched)

    xs_1d, ys_1d = bev_cfg.cell_samples_xy()
    yy, xx = np.meshgrid(ys_1d, xs_1d, indexing="ij")
    xs = xx.reshape(-1)
    ys = yy.reshape(-1)

    inside = _in_footprint(boxes, xs, ys, 0.0)
    dilated = _in_footprint(boxes, xs, ys, ignore_margin)

    any_inside = inside.any(axis=0)
    any_dilated = dilated.any(axis=0)
    flat_labels = np.full(xs.size, LABEL_NEGATIVE, dtype=np.int8)
    flat_labels[any_dilated & ~any_inside] = LABEL_IGNORE
    flat_labels[any_inside] = LABEL_POSITIVE

    centers = np.array([[b.x, b.y] for b in boxes])
    d2 = (centers[:, 0, None] - xs[None, :]) ** 2 + (centers[:, 1, None] - ys[None, :]) ** 2
    d2 = np.where(inside, d2, np.inf)
    # argmin returns the first minimum, i.e. the lowest GT index on ties
    flat_matched = np.where(any_inside, np.argmin(d2, axis=0), -1)

    return TargetAssignment(flat_labels.reshape(ny, nx), flat_matched.reshape(ny, nx))


def encode_box3d(box: Box3D, cell_center):
    """(dx, dy, z, log w, log l, log h, theta) against a cell position."""
    cx, cy = (float(v) for v in cell_center)
    return np.array(
        [
            box.x - cx,
            box.y - cy,
            box.z,
            math.log(box.w),
            math.log(box.l),
            math.log(box.h),
            float(wrap_angle_half_pi(box.yaw)),
        ]
    )


def decode_box3d(encoding, cell_center) -> Box3D:
    """Inverse of :func:`encode_box3d` (theta recovered in [-pi/2, pi/2))."""
    enc = np.asarray(encoding, dtype=np.float64).reshape(7)
    if not np.all(np.isfinite(enc)):
        raise ConfigError("encoding must be finite")
    cx, cy = (float(v) for v in cell_center)
    return Box3D(
        enc[0] + cx,
        enc[1] + cy,
        enc[2],
        math.exp(enc[3]),
        math.exp(enc[4]),
        math.exp(enc[5]),
        enc[6],
    )


def encode_box2d(box: Box2D, anchor_center):
    """(dx, dy, log w, log h) against an anchor position in pixels."""
    ax, ay = (float(v) for v in anchor_center)
    return np.array([box.cx - ax, box.cy - ay, math.log(box.w), math.log(box.h)])


def decode_box2d(encoding, anchor_center) -> Box2D:
    enc = np.asarray(encoding, dtype=np.float64).reshape(4)
    if not np.all(np.isfinite(enc)):
        raise ConfigError("encoding must be finite")
    ax, ay = (float(v) for v in anchor_center)
    return Box2D(enc[0] + ax, enc[1] + ay, math.exp(enc[2]), math.exp(enc[3]))


def smooth_l1(x):
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return out if out.ndim else float(out)


def smooth_l1_deriv(x):
    """Derivative of :func:`smooth_l1`: x inside, sign(x) outside."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < 1.0, x, np.sign(x))
    return out if out.ndim else float(out)


def bce_loss(p, y):
    """Binary cross entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return out if out.ndim else float(out)


def depth_l2(pred, gt):
    """Sum of squared depth errors over the pixels valid in ``gt``."""
    if pred.image_size != gt.image_size:
        raise ConfigError(
            f"depth resolution mismatch: pred {pred.image_size} vs gt {gt.image_size}"
        )
    diff = pred.depth.astype(np.float64) - gt.depth.astype(np.float64)
    return float(np.sum(diff[gt.valid] ** 2))


def total_loss(cls, box, refine2d, refine3d, depth, weights: LossWeights = LossWeights()):
    """classification + w_reg * (box + refine2d + refine3d) + w_depth * depth."""
    terms = [float(v) for v in (cls, box, refine2d, refine3d, depth)]
    if not all(math.isfinite(t) for t in terms):
        raise ConfigError(f"loss terms must be finite, got {terms}")
    cls, box, refine2d, refine3d, depth = terms
    return cls + weights.regression * (box + refine2d + refine3d) + weights.depth * depth
