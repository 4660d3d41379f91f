"""Brute-force reference implementations for checking the fast paths.

Each oracle recomputes a result by the most direct method available (Monte
Carlo sampling, exhaustive search, quadratic loops, finite differences) and
deliberately avoids the code path it checks.  The polygon-clipping IoU
kernel is the one shared primitive: once it has passed its own Monte-Carlo
check, the NMS and matching oracles may call it pair by pair.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .evaluation import DET_FP, DET_IGNORED, DET_TP, EvalConfig, difficulty_filter
from .iou import iou3d_pairs, rotated_iou_pairs

__all__ = [
    "random_bev_boxes",
    "random_boxes3d",
    "mc_rotated_iou",
    "mc_iou3d",
    "exhaustive_nearest",
    "reference_nms",
    "reference_match",
    "reference_ap",
    "fd_gradient",
    "relative_gradient_error",
    "roi_map_gradcheck",
    "mlp_kink_clearance",
    "mlp_gradcheck",
    "trilinear_weights_single",
    "run_all_checks",
]


def random_bev_boxes(rng, n, center_span=5.0, size_range=(0.5, 5.0)):
    """(n, 5) boxes (cx, cy, w, l, yaw) for overlap experiments."""
    out = np.empty((n, 5))
    out[:, 0] = rng.uniform(-center_span, center_span, n)
    out[:, 1] = rng.uniform(-center_span, center_span, n)
    out[:, 2] = rng.uniform(*size_range, n)
    out[:, 3] = rng.uniform(*size_range, n)
    out[:, 4] = rng.uniform(-math.pi, math.pi, n)
    return out


def random_boxes3d(rng, n, center_span=5.0, size_range=(0.5, 5.0)):
    """(n, 7) boxes (cx, cy, cz, w, l, h, yaw)."""
    out = np.empty((n, 7))
    out[:, 0] = rng.uniform(-center_span, center_span, n)
    out[:, 1] = rng.uniform(-center_span, center_span, n)
    out[:, 2] = rng.uniform(-2.0, 2.0, n)
    out[:, 3] = rng.uniform(*size_range, n)
    out[:, 4] = rng.uniform(*size_range, n)
    out[:, 5] = rng.uniform(*size_range, n)
    out[:, 6] = rng.uniform(-math.pi, math.pi, n)
    return out


def _inside_bev(x, y, box5):
    cx, cy, w, l, yaw = box5
    c, s = math.cos(yaw), math.sin(yaw)
    dx = x - cx
    dy = y - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)


def _bev_aabb(box5):
    cx, cy, w, l, yaw = box5
    c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
    hx = (l * c + w * s) / 2
    hy = (l * s + w * c) / 2
    return cx - hx, cx + hx, cy - hy, cy + hy


def mc_rotated_iou(box_a, box_b, n_samples=1_000_000, seed=0):
    """Monte-Carlo BEV IoU: uniform samples over the joint bounding rect."""
    ax0, ax1, ay0, ay1 = _bev_aabb(box_a)
    bx0, bx1, by0, by1 = _bev_aabb(box_b)
    x0, x1 = min(ax0, bx0), max(ax1, bx1)
    y0, y1 = min(ay0, by0), max(ay1, by1)
    rng = np.random.default_rng(seed)
    xs = rng.uniform(x0, x1, n_samples)
    ys = rng.uniform(y0, y1, n_samples)
    in_a = _inside_bev(xs, ys, box_a)
    in_b = _inside_bev(xs, ys, box_b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def mc_iou3d(box_a, box_b, n_samples=1_000_000, seed=0):
    """Monte-Carlo volumetric IoU of two upright boxes."""

    def aabb(box):
        x0, x1, y0, y1 = _bev_aabb(box[[0, 1, 3, 4, 6]])
        return x0, x1, y0, y1, box[2] - box[5] / 2, box[2] + box[5] / 2

    ax = aabb(box_a)
    bx = aabb(box_b)
    lo = [min(a, b) for a, b in zip(ax[::2], bx[::2])]
    hi = [max(a, b) for a, b in zip(ax[1::2], bx[1::2])]
    rng = np.random.default_rng(seed)
    xs = rng.uniform(lo[0], hi[0], n_samples)
    ys = rng.uniform(lo[1], hi[1], n_samples)
    zs = rng.uniform(lo[2], hi[2], n_samples)

    def inside(box):
        bev = _inside_bev(xs, ys, box[[0, 1, 3, 4, 6]])
        return bev & (np.abs(zs - box[2]) <= box[5] / 2)

    in_a = inside(box_a)
    in_b = inside(box_b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def exhaustive_nearest(points2, queries2, radius):
    """Per-query scan of every point: nearest within the inclusive radius.

    Exact float64 squared distances; ties resolve to the smallest point
    index.  Returns (index, matched) with index -1 where unmatched.
    """
    points2 = np.asarray(points2, dtype=np.float64)
    queries2 = np.asarray(queries2, dtype=np.float64)
    out = np.full(queries2.shape[0], -1, dtype=np.int64)
    matched = np.zeros(queries2.shape[0], dtype=bool)
    r2 = radius * radius
    for qi in range(queries2.shape[0]):
        best = -1
        best_d2 = np.inf
        for pi in range(points2.shape[0]):
            dx = points2[pi, 0] - queries2[qi, 0]
            dy = points2[pi, 1] - queries2[qi, 1]
            d2 = dx * dx + dy * dy
            if d2 <= r2 and d2 < best_d2:
                best = pi
                best_d2 = d2
        out[qi] = best
        matched[qi] = best >= 0
    return out, matched


def reference_nms(detections, score_threshold, iou_threshold):
    """Quadratic-loop greedy suppression; same contract as the fast path.

    The pairwise overlaps come from the shared IoU kernel, evaluated as one
    dense matrix up front; only the suppression logic itself is the oracle,
    and that stays a plain double loop over the matrix.
    """
    from .iou import rotated_iou_matrix

    survivors = [d for d in detections if d.score >= score_threshold]
    if not survivors:
        return []
    order = sorted(range(len(survivors)), key=lambda i: (-survivors[i].score, i))
    params = np.array([[d.box.x, d.box.y, d.box.w, d.box.l, d.box.yaw] for d in survivors])
    iou = rotated_iou_matrix(params, params)
    kept = []
    removed = set()
    for pos, i in enumerate(order):
        if i in removed:
            continue
        kept.append(survivors[i])
        for j in order[pos + 1 :]:
            if j not in removed and iou[i, j] >= iou_threshold:
                removed.add(j)
    return kept


def _pair_iou(det, gt, kind):
    if kind == "2d":
        d, g = det.box2d, gt.box2d
        iw = min(d.x_max, g.x_max) - max(d.x_min, g.x_min)
        ih = min(d.y_max, g.y_max) - max(d.y_min, g.y_min)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        union = d.w * d.h + g.w * g.h - inter
        return inter / union if union > 0 else 0.0
    b, t = det.box, gt.box3d
    if kind == "bev":
        return float(
            rotated_iou_pairs(
                np.array([[b.x, b.y, b.w, b.l, b.yaw]]),
                np.array([[t.x, t.y, t.w, t.l, t.yaw]]),
            )[0]
        )
    return float(
        iou3d_pairs(
            np.array([[b.x, b.y, b.z, b.w, b.l, b.h, b.yaw]]),
            np.array([[t.x, t.y, t.z, t.w, t.l, t.h, t.yaw]]),
        )[0]
    )


def reference_match(detections, gt_objects, cfg: EvalConfig):
    """Plain-loop restatement of the matching rule.

    Descending score (ties by input order); claim the unmatched counted GT
    of highest IoU >= threshold, lowest index on ties; else ignored if any
    ignored GT clears the threshold; else FP.
    """
    detections = list(detections)
    gt_objects = list(gt_objects)
    flags = [DET_FP] * len(detections)
    if not detections:
        return np.array(flags, dtype=np.int8)
    thr = cfg.threshold_for(detections[0].class_id)
    counted = [difficulty_filter(g, cfg.difficulty) for g in gt_objects]
    taken = [False] * len(gt_objects)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    for di in order:
        det = detections[di]
        best_gt, best_iou = -1, -1.0
        for gi, gt in enumerate(gt_objects):
            if not counted[gi] or taken[gi]:
                continue
            iou = _pair_iou(det, gt, cfg.overlap_kind)
            if iou >= thr and iou > best_iou:
                best_gt, best_iou = gi, iou
        if best_gt >= 0:
            taken[best_gt] = True
            flags[di] = DET_TP
            continue
        ignored = False
        for gi, gt in enumerate(gt_objects):
            if counted[gi]:
                continue
            if _pair_iou(det, gt, cfg.overlap_kind) >= thr:
                ignored = True
                break
        flags[di] = DET_IGNORED if ignored else DET_FP
    return np.array(flags, dtype=np.int8)


def reference_ap(scores, flags, total_counted_gt):
    """Envelope AP by explicit scan, no shared code with the evaluator."""
    total = int(total_counted_gt)
    if total == 0:
        return 0.0
    pairs = sorted(
        [(float(s), int(f), i) for i, (s, f) in enumerate(zip(scores, flags))],
        key=lambda t: (-t[0], t[2]),
    )
    tp = fp = 0
    points = []
    for _, f, _ in pairs:
        if f == DET_IGNORED:
            continue
        if f == DET_TP:
            tp += 1
        else:
            fp += 1
        points.append((tp / total, tp / (tp + fp)))
    acc = 0.0
    for i in range(11):
        r = i / 10.0
        best = 0.0
        for rec, pre in points:
            if rec >= r and pre > best:
                best = pre
        acc += best
    return acc / 11.0


def fd_gradient(fn, x, step=1e-5):
    """Central finite differences of a scalar function, matching x's shape."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x)
        flat[i] = orig - step
        f_minus = fn(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_gradient_error(analytic, fd, floor=1e-3):
    """Max elementwise |a - f| / max(floor, |a|, |f|).

    The floor keeps finite-difference rounding noise on true-zero entries
    from registering as relative error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(fd)))
    return float(np.max(np.abs(analytic - fd) / scale))


def roi_map_gradcheck(fmap, roi, step=1e-5, seed=0):
    """Max relative error of the ROI vector-Jacobian product vs central FD.

    The finite-difference sweep perturbs a float64 copy of the map values
    and resamples the stored lattice positions directly, so the comparison
    is against the exact function the adjoint differentiates.
    """
    from .interp import bilinear_gather
    from .roi import extract_oriented_roi

    feats = extract_oriented_roi(fmap, roi)
    rng = np.random.default_rng(seed)
    upstream = rng.standard_normal(feats.values.shape)
    analytic = feats.grad_wrt_map(upstream)
    flat_up = upstream.reshape(upstream.shape[0], -1)
    base = np.asarray(fmap.values, dtype=np.float64).copy()

    def loss(values):
        samples = bilinear_gather(values, feats.sample_rows, feats.sample_cols)
        return float(np.sum(samples * flat_up))

    fd = fd_gradient(loss, base, step)
    return relative_gradient_error(analytic, fd)


def mlp_kink_clearance(mlp, x):
    """Smallest |hidden pre-activation| along the forward pass.

    Finite differences through the rectifier are only trustworthy when this
    clearance is large against the step times the activation scale.
    """
    h = np.asarray(x, dtype=np.float64).reshape(-1)
    worst = math.inf
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        z = w @ h + b
        if z.size:
            worst = min(worst, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0)
    return worst


def mlp_gradcheck(mlp, x, step=1e-5, seed=0):
    """Max relative error of MLP input+parameter gradients vs central FD.

    The caller is responsible for an input clear of rectifier kinks
    (:func:`mlp_kink_clearance`); the sweep flattens (input, weights,
    biases) into one vector and rebuilds the network per evaluation.
    """
    from .fusion import FusionMLP, mlp_forward, mlp_forward_backward

    x = np.asarray(x, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    upstream = rng.standard_normal(mlp.output_size)
    _, dx, param_grads = mlp_forward_backward(mlp, x, upstream)
    analytic = np.concatenate(
        [dx] + [np.concatenate([gw.ravel(), gb]) for gw, gb in param_grads]
    )

    shapes = [(w.shape, b.shape) for w, b in zip(mlp.weights, mlp.biases)]
    n_in = x.size

    def unpack(theta):
        xs = theta[:n_in]
        i = n_in
        ws, bs = [], []
        for w_shape, b_shape in shapes:
            k = w_shape[0] * w_shape[1]
            ws.append(theta[i : i + k].reshape(w_shape))
            i += k
            bs.append(theta[i : i + b_shape[0]])
            i += b_shape[0]
        return xs, FusionMLP(tuple(ws), tuple(bs))

    def loss(theta):
        xs, net = unpack(theta)
        return float(np.dot(mlp_forward(net, xs), upstream))

    theta0 = np.concatenate(
        [x] + [np.concatenate([w.ravel(), b]) for w, b in zip(mlp.weights, mlp.biases)]
    )
    fd = fd_gradient(loss, theta0, step)
    return relative_gradient_error(analytic, fd)


def trilinear_weights_single(point, grid):
    """The 8 node weights of one in-bounds point, by the direct product formula.

    Returns (flat_node_indices, weights).  Node convention: lower node is
    floor of the continuous cell coordinate (c - min)/edge, upper node is
    the next lattice index clamped to the last cell.
    """
    x, y, z = (float(v) for v in point[:3])
    mins = grid.mins
    ex, ey, ez = grid.edges
    res = (grid.nx, grid.ny, grid.nz)
    coords = []
    for c, m, e, n in zip((x, y, z), mins, (ex, ey, ez), res):
        g = (c - m) / e
        lo = math.floor(g)
        frac = g - lo
        lo_c = min(lo, n - 1)
        hi_c = min(lo + 1, n - 1)
        coords.append(((lo_c, 1.0 - frac), (hi_c, frac)))
    nodes = []
    weights = []
    for ix, wx in coords[0]:
        for iy, wy in coords[1]:
            for iz, wz in coords[2]:
                nodes.append((iz * grid.ny + iy) * grid.nx + ix)
                weights.append(wx * wy * wz)
    return np.array(nodes), np.array(weights)


def run_all_checks(seed=0, verbose=False):
    """Scaled-down oracle sweep for the command line; returns result rows.

    Each row is (name, passed, detail).  Tolerances here are looser than
    the acceptance suite's because the sample counts are smaller.
    """
    from . import fusion, nms
    from .evaluation import ap_11point
    from .fusion import FeatureMap, FusionMLP
    from .geometry import Box3D, OrientedBoxBEV
    from .nms import Detection
    from .roi import OrientedROI
    from .voxelize import VoxelGridConfig, trilinear_contributions

    rng = np.random.default_rng(seed)
    rows = []

    t0 = time.time()
    a = random_bev_boxes(rng, 40)
    b = a + np.column_stack(
        [rng.uniform(-2, 2, 40), rng.uniform(-2, 2, 40), np.zeros((40, 3))]
    )
    b[:, 2:4] = np.abs(b[:, 2:4]) + 0.5
    exact = rotated_iou_pairs(a, b)
    worst = 0.0
    for i in range(40):
        approx = mc_rotated_iou(a[i], b[i], n_samples=200_000, seed=seed + i)
        worst = max(worst, abs(approx - exact[i]))
    rows.append(("rotated-iou vs monte-carlo", worst < 8e-3, f"max |err| {worst:.2e}"))

    a3 = random_boxes3d(rng, 20)
    b3 = a3.copy()
    b3[:, :2] += rng.uniform(-2, 2, (20, 2))
    b3[:, 2] += rng.uniform(-1, 1, 20)
    exact3 = iou3d_pairs(a3, b3)
    worst3 = 0.0
    for i in range(20):
        approx = mc_iou3d(a3[i], b3[i], n_samples=200_000, seed=seed + 100 + i)
        worst3 = max(worst3, abs(approx - exact3[i]))
    rows.append(("3d-iou vs monte-carlo", worst3 < 8e-3, f"max |err| {worst3:.2e}"))

    pts = rng.uniform(-10, 10, (300, 2))
    queries = rng.uniform(-10, 10, (200, 2))
    fast_idx, fast_ok = fusion._nearest_in_radius(pts, queries, 2.0)
    ref_idx, ref_ok = exhaustive_nearest(pts, queries, 2.0)
    nn_pass = np.array_equal(fast_idx, ref_idx) and np.array_equal(fast_ok, ref_ok)
    rows.append(("nearest-neighbor vs exhaustive", nn_pass, f"{queries.shape[0]} queries"))

    dets = []
    boxes = random_bev_boxes(rng, 60, center_span=8.0, size_range=(1.0, 4.0))
    for i in range(60):
        dets.append(
            Detection(
                Box3D(boxes[i, 0], boxes[i, 1], 0.0, boxes[i, 2], boxes[i, 3], 1.5, boxes[i, 4]),
                float(rng.uniform(0, 1)),
            )
        )
    fast = nms.oriented_nms(dets, 0.2, 0.5)
    ref = reference_nms(dets, 0.2, 0.5)
    rows.append(("oriented-nms vs quadratic", fast == ref, f"{len(fast)} kept"))

    ap_pass = True
    for case in range(25):
        case_rng = np.random.default_rng(seed + 1000 + case)
        n = int(case_rng.integers(1, 15))
        scores = case_rng.uniform(0, 1, n)
        flags = case_rng.integers(0, 3, n)
        total = int(case_rng.integers(1, 10))
        fast_ap = ap_11point(scores, flags, total).ap
        ref_ap = reference_ap(scores, flags, total)
        if fast_ap != ref_ap:
            ap_pass = False
            break
    rows.append(("11-point AP vs envelope scan", ap_pass, "25 random flag sets"))

    grid = VoxelGridConfig(x_range=(0, 8), y_range=(-4, 4), z_range=(-2, 2), resolution=(16, 16, 8))
    pts3 = np.column_stack(
        [rng.uniform(0, 8, 500), rng.uniform(-4, 4, 500), rng.uniform(-2, 2, 500)]
    )
    nodes, weights, point_id = trilinear_contributions(pts3, grid)
    tri_pass = True
    for i in rng.choice(500, size=40, replace=False):
        ref_nodes, ref_w = trilinear_weights_single(pts3[i], grid)
        sel = point_id == i
        got = np.zeros(grid.nx * grid.ny * grid.nz)
        np.add.at(got, nodes[sel], weights[sel])
        want = np.zeros_like(got)
        np.add.at(want, ref_nodes, ref_w)
        if not np.allclose(got, want, atol=1e-12):
            tri_pass = False
            break
    rows.append(("trilinear weights vs direct formula", tri_pass, "40 sampled points"))

    worst_roi = 0.0
    for trial in range(5):
        fmap = FeatureMap(
            np.round(rng.standard_normal((3, 20, 20)), 4), stride=0.5, origin=(0.0, -5.0)
        )
        box = OrientedBoxBEV(
            float(rng.uniform(2, 8)),
            float(rng.uniform(-3, 3)),
            float(rng.uniform(1, 3)),
            float(rng.uniform(2, 4)),
            float(rng.uniform(-math.pi, math.pi)),
        )
        roi = OrientedROI.from_box(box, 4)
        worst_roi = max(worst_roi, roi_map_gradcheck(fmap, roi, seed=seed + trial))
    rows.append(("roi adjoint vs finite differences", worst_roi < 1e-4, f"max rel {worst_roi:.2e}"))

    worst_mlp = 0.0
    for trial in range(5):
        net = FusionMLP.create([5, 8, 3], seed=seed + trial)
        x = rng.standard_normal(5)
        while mlp_kink_clearance(net, x) < 1e-3:
            x = rng.standard_normal(5)
        worst_mlp = max(worst_mlp, mlp_gradcheck(net, x, seed=seed + trial))
    rows.append(("mlp gradients vs finite differences", worst_mlp < 1e-4, f"max rel {worst_mlp:.2e}"))

    elapsed = time.time() - t0
    if verbose:
        for name, ok, detail in rows:
            print(f"{'PASS' if ok else 'FAIL'}  {name:<40} {detail}")
        print(f"total {elapsed:.1f}s")
    return rows
