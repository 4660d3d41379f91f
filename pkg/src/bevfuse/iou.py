"""Exact overlap measures between boxes: axis-aligned, rotated BEV, and 3D.

Rotated intersection is computed by clipping one rectangle against the four
half-planes of the other (Sutherland-Hodgman on convex quads) and taking the
shoelace area of the clipped polygon.  Vertices within ``ON_EDGE_EPS`` of a
clip edge count as inside, which keeps identical boxes at IoU exactly 1.0
and makes shared-edge cases stable.

Box areas inside the IoU ratio are computed by the same shoelace path as the
intersection so that the identical-box case cancels exactly.

The batch kernel works on arrays of box pairs; the scalar functions wrap it.
All functions are pure and allocate fresh outputs.
"""

from __future__ import annotations

import numpy as np

from .geometry import Box2D, Box3D, OrientedBoxBEV, rotation_z

__all__ = [
    "ON_EDGE_EPS",
    "iou_2d",
    "rotated_iou_bev",
    "iou_3d",
    "rotated_iou_pairs",
    "iou3d_pairs",
    "rotated_iou_matrix",
    "bev_corners_batch",
]

ON_EDGE_EPS = 1e-12


def bev_corners_batch(params):
    """Corners (N, 4, 2), counter-clockwise, from (N, 5) rows (cx cy w l yaw).

    Matches ``OrientedBoxBEV.corners()`` ordering.
    """
    params = np.asarray(params, dtype=np.float64).reshape(-1, 5)
    cx, cy, w, l, yaw = params.T
    half = np.empty((params.shape[0], 4, 2))
    half[:, 0] = np.stack([+l / 2, +w / 2], axis=1)
    half[:, 1] = np.stack([-l / 2, +w / 2], axis=1)
    half[:, 2] = np.stack([-l / 2, -w / 2], axis=1)
    half[:, 3] = np.stack([+l / 2, -w / 2], axis=1)
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.empty_like(half)
    out[..., 0] = half[..., 0] * c[:, None] - half[..., 1] * s[:, None] + cx[:, None]
    out[..., 1] = half[..., 0] * s[:, None] + half[..., 1] * c[:, None] + cy[:, None]
    return out


def _shoelace_batch(verts, counts):
    """Signed polygon areas for padded vertex rows with per-row counts."""
    m, vmax, _ = verts.shape
    j = np.arange(vmax)[None, :]
    valid = j < counts[:, None]
    nxt = np.where(j + 1 < counts[:, None], j + 1, 0)
    v_next = np.take_along_axis(verts, nxt[..., None].repeat(2, axis=2), axis=1)
    cross = verts[..., 0] * v_next[..., 1] - verts[..., 1] * v_next[..., 0]
    cross = np.where(valid, cross, 0.0)
    return 0.5 * cross.sum(axis=1)


def _clip_convex_batch(subject, counts, clip):
    """Clip padded subject polygons against CCW clip quads, row by row.

    subject: (M, V, 2) padded vertices, counts: (M,) valid vertex counts,
    clip: (M, 4, 2) counter-clockwise quads.  Returns (verts, counts) of the
    clipped polygons, padded.
    """
    verts = subject
    counts = counts.copy()
    for e in range(4):
        m, vmax, _ = verts.shape
        p = clip[:, e]
        q = clip[:, (e + 1) % 4]
        d = q - p
        edge_len = np.hypot(d[:, 0], d[:, 1])

        rel = verts - p[:, None, :]
        # Perpendicular signed distance; positive = inside (left of edge).
        dist = (d[:, None, 0] * rel[..., 1] - d[:, None, 1] * rel[..., 0]) / edge_len[:, None]

        j = np.arange(vmax)[None, :]
        valid = j < counts[:, None]
        inside = dist >= -ON_EDGE_EPS

        nxt = np.where(j + 1 < counts[:, None], j + 1, 0)
        v_next = np.take_along_axis(verts, nxt[..., None].repeat(2, axis=2), axis=1)
        dist_next = np.take_along_axis(dist, nxt, axis=1)
        inside_next = np.take_along_axis(inside, nxt, axis=1)

        crossing = valid & (inside != inside_next)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = dist / (dist - dist_next)
        t = np.where(crossing, t, 0.0)
        inter_pt = verts + t[..., None] * (v_next - verts)

        cand = np.empty((m, 2 * vmax, 2))
        cand[:, 0::2] = verts
        cand[:, 1::2] = inter_pt
        emit = np.zeros((m, 2 * vmax), dtype=bool)
        emit[:, 0::2] = valid & inside
        emit[:, 1::2] = crossing

        new_counts = emit.sum(axis=1)
        out_vmax = max(int(new_counts.max(initial=0)), 1)
        out = np.zeros((m, out_vmax, 2))
        pos = np.cumsum(emit, axis=1) - 1
        rows = np.broadcast_to(np.arange(m)[:, None], emit.shape)
        out[rows[emit], pos[emit]] = cand[emit]
        verts, counts = out, new_counts
    return verts, counts


def rotated_iou_pairs(params_a, params_b):
    """Elementwise rotated IoU for (M, 5) box parameter arrays."""
    params_a = np.asarray(params_a, dtype=np.float64).reshape(-1, 5)
    params_b = np.asarray(params_b, dtype=np.float64).reshape(-1, 5)
    if params_a.shape != params_b.shape:
        raise ValueError(f"shape mismatch: {params_a.shape} vs {params_b.shape}")
    m = params_a.shape[0]
    if m == 0:
        return np.zeros(0)
    corners_a = bev_corners_batch(params_a)
    corners_b = bev_corners_batch(params_b)
    area_a = _shoelace_batch(corners_a, np.full(m, 4))
    area_b = _shoelace_batch(corners_b, np.full(m, 4))
    verts, counts = _clip_convex_batch(corners_a, np.full(m, 4), corners_b)
    inter = _shoelace_batch(verts, counts)
    inter = np.clip(inter, 0.0, None)
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return np.clip(iou, 0.0, 1.0)


def rotated_iou_matrix(params_a, params_b):
    """Full IoU matrix (A, B) between two (.,5) parameter arrays."""
    params_a = np.asarray(params_a, dtype=np.float64).reshape(-1, 5)
    params_b = np.asarray(params_b, dtype=np.float64).reshape(-1, 5)
    a, b = params_a.shape[0], params_b.shape[0]
    if a == 0 or b == 0:
        return np.zeros((a, b))
    rep_a = np.repeat(params_a, b, axis=0)
    rep_b = np.tile(params_b, (a, 1))
    return rotated_iou_pairs(rep_a, rep_b).reshape(a, b)


def _bev_params(box: OrientedBoxBEV):
    return np.array([box.cx, box.cy, box.w, box.l, box.yaw])


def rotated_iou_bev(a: OrientedBoxBEV, b: OrientedBoxBEV) -> float:
    """IoU of two rotated rectangles in the BEV plane."""
    return float(rotated_iou_pairs(_bev_params(a)[None], _bev_params(b)[None])[0])


def iou_2d(a: Box2D, b: Box2D) -> float:
    """IoU of two axis-aligned boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou3d_pairs(params_a, params_b):
    """Elementwise 3D IoU for (M, 7) rows (cx cy cz w l h yaw).

    Volume = BEV footprint area (shoelace) times height, intersection =
    BEV intersection area times vertical interval overlap.
    """
    params_a = np.asarray(params_a, dtype=np.float64).reshape(-1, 7)
    params_b = np.asarray(params_b, dtype=np.float64).reshape(-1, 7)
    if params_a.shape != params_b.shape:
        raise ValueError(f"shape mismatch: {params_a.shape} vs {params_b.shape}")
    m = params_a.shape[0]
    if m == 0:
        return np.zeros(0)

    bev_a = params_a[:, [0, 1, 3, 4, 6]]
    bev_b = params_b[:, [0, 1, 3, 4, 6]]
    corners_a = bev_corners_batch(bev_a)
    corners_b = bev_corners_batch(bev_b)
    area_a = _shoelace_batch(corners_a, np.full(m, 4))
    area_b = _shoelace_batch(corners_b, np.full(m, 4))
    verts, counts = _clip_convex_batch(corners_a, np.full(m, 4), corners_b)
    inter_area = np.clip(_shoelace_batch(verts, counts), 0.0, None)

    za, ha = params_a[:, 2], params_a[:, 5]
    zb, hb = params_b[:, 2], params_b[:, 5]
    dz = np.minimum(za + ha / 2, zb + hb / 2) - np.maximum(za - ha / 2, zb - hb / 2)
    dz = np.clip(dz, 0.0, None)

    inter = inter_area * dz
    union = area_a * ha + area_b * hb - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return np.clip(iou, 0.0, 1.0)


def _box3d_params(box: Box3D):
    return np.array([box.x, box.y, box.z, box.w, box.l, box.h, box.yaw])


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two oriented (yaw-only) 3D boxes."""
    return float(iou3d_pairs(_box3d_params(a)[None], _box3d_params(b)[None])[0])
