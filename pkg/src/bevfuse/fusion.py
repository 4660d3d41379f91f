"""Point-wise continuous fusion of image features into the BEV grid.

The fusion path is: aggregate the image feature pyramid to a single fine
map, link every BEV cell to its nearest LiDAR point (real returns take
priority over pseudo-points), sample the image map where that point
projects, append the cell-to-point geometric offset, push the vector
through a small MLP, and add the result onto the BEV cell's features.

Everything here is pure and deterministic: candidate points are sorted
canonically by (x, y, z) before neighbor search, and exact distance ties
resolve to the smallest canonical index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ParseError
from .geometry import CalibrationProfile, project_points_to_image, transform_points_to_camera
from .interp import bilinear_gather, resize_bilinear
from .voxelize import VoxelGridConfig

__all__ = [
    "FeatureMap",
    "CorrespondenceMap",
    "FusionMLP",
    "aggregate_multiscale",
    "build_correspondence_map",
    "continuous_fuse",
    "mlp_forward",
    "mlp_forward_batch",
    "mlp_forward_backward",
    "save_mlp",
    "load_mlp",
]

DEFAULT_SEARCH_RADIUS = 2.0


@dataclass(frozen=True)
class FeatureMap:
    """Dense (channels, rows, cols) float32 grid with georeferencing.

    ``stride`` is the spacing between neighboring cell sample positions:
    pixels per cell for image-derived maps, meters per cell for BEV maps.
    ``origin`` is the (x, y) position of cell (row 0, col 0); x runs along
    columns and y along rows, so cell (r, c) samples
    ``(origin[0] + c * stride, origin[1] + r * stride)``.
    """

    values: np.ndarray
    stride: float
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise ConfigError(f"values must be (channels, rows, cols), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError("feature map has non-finite values")
        stride = float(self.stride)
        if not np.isfinite(stride) or stride <= 0:
            raise ConfigError(f"stride must be positive, got {stride!r}")
        ox, oy = self.origin
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "origin", (float(ox), float(oy)))

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def rows(self):
        return self.values.shape[1]

    @property
    def cols(self):
        return self.values.shape[2]

    def cell_of(self, x, y):
        """Continuous (row, col) of a georeferenced position."""
        return (y - self.origin[1]) / self.stride, (x - self.origin[0]) / self.stride

    @classmethod
    def for_grid(cls, values, grid: VoxelGridConfig):
        """Wrap BEV-shaped values with the grid's georeference.

        Requires square x/y cells since a map carries a single stride.
        """
        ex, ey, _ = grid.edges
        if not np.isclose(ex, ey):
            raise ConfigError(f"BEV feature maps need square cells, got edges {(ex, ey)}")
        return cls(values, stride=ex, origin=(grid.x_range[0], grid.y_range[0]))


SOURCE_NONE = 0
SOURCE_TRUE = 1
SOURCE_PSEUDO = 2


@dataclass(frozen=True)
class CorrespondenceMap:
    """Per-BEV-cell link to a 3D point and its image-plane position.

    ``source`` is 0 (no record), 1 (true LiDAR) or 2 (pseudo-point);
    ``image_position`` holds continuous (row, col) in feature-map cells and
    ``geometric_feature`` the (dx, dy, z) offset from the cell's sample
    position to the matched point.  ``point_index`` is the match's index in
    the canonically sorted point array of its source (-1 where unmatched);
    it exists for diagnostics and tests, fusion never reads it.
    """

    source: np.ndarray
    image_position: np.ndarray
    geometric_feature: np.ndarray
    point_index: np.ndarray
    image_map_shape: tuple

    def __post_init__(self):
        source = np.asarray(self.source, dtype=np.int8)
        pos = np.asarray(self.image_position, dtype=np.float64)
        geo = np.asarray(self.geometric_feature, dtype=np.float64)
        idx = np.asarray(self.point_index, dtype=np.int64)
        if source.ndim != 2:
            raise ConfigError(f"source must be (rows, cols), got {source.shape}")
        if pos.shape != source.shape + (2,) or geo.shape != source.shape + (3,):
            raise ConfigError("image_position/geometric_feature shapes do not match source")
        if idx.shape != source.shape:
            raise ConfigError("point_index shape does not match source")
        matched = source != SOURCE_NONE
        if not np.all(np.isfinite(geo[matched])):
            raise ConfigError("geometric features must be finite")
        rows, cols = (int(n) for n in self.image_map_shape)
        p = pos[matched]
        if p.size and (
            p[:, 0].min() < 0
            or p[:, 0].max() > rows - 1
            or p[:, 1].min() < 0
            or p[:, 1].max() > cols - 1
        ):
            raise ConfigError("image positions must lie inside the feature map")
        for arr in (source, pos, geo, idx):
            arr.setflags(write=False)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "image_position", pos)
        object.__setattr__(self, "geometric_feature", geo)
        object.__setattr__(self, "point_index", idx)
        object.__setattr__(self, "image_map_shape", (rows, cols))

    @property
    def matched(self):
        return self.source != SOURCE_NONE

    @property
    def match_count(self):
        return int(np.count_nonzero(self.source))


@dataclass(frozen=True)
class FusionMLP:
    """Fully connected layers, rectifier on hidden layers, linear output."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        weights = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        biases = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        if not weights or len(weights) != len(biases):
            raise ConfigError("weights and biases must be non-empty and parallel")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != weights[i - 1].shape[0]:
                raise ConfigError(
                    f"layer {i} input {w.shape[1]} != layer {i-1} output {weights[i-1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigError(f"layer {i} has non-finite parameters")
        for w in weights:
            w.setflags(write=False)
        for b in biases:
            b.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def layer_sizes(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_size(self):
        return self.weights[0].shape[1]

    @property
    def output_size(self):
        return self.weights[-1].shape[0]

    @classmethod
    def create(cls, layer_sizes, seed=0):
        """Random scaled-normal init (deterministic in ``seed``)."""
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ConfigError(f"layer_sizes needs >= 2 positive entries, got {layer_sizes}")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(tuple(weights), tuple(biases))

    @classmethod
    def zeros(cls, layer_sizes):
        sizes = [int(n) for n in layer_sizes]
        return cls(
            tuple(np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])),
            tuple(np.zeros(o) for o in sizes[1:]),
        )


def mlp_forward_batch(mlp: FusionMLP, x):
    """Forward pass for (B, input_size) batches."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.input_size:
        raise ConfigError(f"input shape {x.shape} does not match MLP input {mlp.input_size}")
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def mlp_forward(mlp: FusionMLP, x):
    """Forward pass for a single input vector."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return mlp_forward_batch(mlp, x)[0]


def mlp_forward_backward(mlp: FusionMLP, x, upstream):
    """Reverse-mode gradients of a scalar loss with given output cotangent.

    Returns ``(output, input_gradient, parameter_gradients)`` where
    parameter_gradients is a list of (weight_grad, bias_grad) per layer.
    The rectifier subgradient at exactly 0 is taken as 0.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != mlp.input_size:
        raise ConfigError(f"input length {x.shape[0]} does not match MLP input {mlp.input_size}")
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if upstream.shape[0] != mlp.output_size:
        raise ConfigError(
            f"upstream length {upstream.shape[0]} does not match MLP output {mlp.output_size}"
        )

    last = len(mlp.weights) - 1
    activations = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = w @ h + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i != last else z
        activations.append(h)

    grad = upstream
    param_grads = [None] * len(mlp.weights)
    for i in range(last, -1, -1):
        if i != last:
            grad = grad * (pre[i] > 0.0)
        param_grads[i] = (np.outer(grad, activations[i]), grad.copy())
        grad = mlp.weights[i].T @ grad
    return activations[-1], grad, param_grads


def save_mlp(path, mlp: FusionMLP):
    """One JSON header line (layer sizes, dtype) + little-endian float32 blob.

    Blob layout: for each layer, the weight matrix row-major then the bias.
    """
    path = Path(path)
    header = {"layer_sizes": list(mlp.layer_sizes), "dtype": "float32le"}
    parts = [json.dumps(header, sort_keys=True).encode() + b"\n"]
    for w, b in zip(mlp.weights, mlp.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_mlp(path) -> FusionMLP:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read MLP file: {exc}", path=str(path)) from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise ParseError("missing header line", path=str(path), line=1)
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"invalid JSON header: {exc}", path=str(path), line=1) from exc
    if not isinstance(header, dict) or "layer_sizes" not in header:
        raise ParseError("header must be an object with 'layer_sizes'", path=str(path), line=1)
    sizes = header["layer_sizes"]
    if (
        not isinstance(sizes, list)
        or len(sizes) < 2
        or not all(isinstance(n, int) and n > 0 for n in sizes)
    ):
        raise ParseError(f"invalid layer_sizes {sizes!r}", path=str(path), line=1)
    if header.get("dtype", "float32le") != "float32le":
        raise ParseError(f"unsupported dtype {header.get('dtype')!r}", path=str(path), line=1)

    blob = raw[newline + 1 :]
    expected = sum((o * i + o) for i, o in zip(sizes[:-1], sizes[1:])) * 4
    if len(blob) != expected:
        raise ParseError(
            f"parameter blob is {len(blob)} bytes, expected {expected}",
            path=str(path),
            offset=newline + 1 + min(len(blob), expected),
        )
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise ParseError(f"non-finite parameter at index {bad}", path=str(path), offset=newline + 1 + bad * 4)
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in))
        pos += fan_out * fan_in
        biases.append(flat[pos : pos + fan_out])
        pos += fan_out
    return FusionMLP(tuple(weights), tuple(biases))


def aggregate_multiscale(maps):
    """Sum an image feature pyramid into the finest map's grid.

    ``maps`` are FeatureMaps ordered finest first with strictly increasing
    strides (the standard pyramid is strides 4, 8, 16, 32); all channel
    counts must match.  Coarse maps are upsampled by corner-aligned
    bilinear interpolation (see :func:`bevfuse.interp.resize_bilinear`) to
    the finest map's shape and summed element-wise.
    """
    maps = list(maps)
    if not maps:
        raise ConfigError("aggregate_multiscale needs at least one map")
    base = maps[0]
    for i, m in enumerate(maps[1:], start=1):
        if m.channels != base.channels:
            raise ConfigError(
                f"channel mismatch: map 0 has {base.channels}, map {i} has {m.channels}"
            )
        if m.stride <= maps[i - 1].stride:
            raise ConfigError("strides must be strictly increasing, finest first")
    total = base.values.astype(np.float64)
    for m in maps[1:]:
        total = total + resize_bilinear(m.values.astype(np.float64), (base.rows, base.cols))
    return FeatureMap(total.astype(np.float32), stride=base.stride, origin=base.origin)


def _as_xyz(points):
    if isinstance(points, np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            return np.zeros((0, 3))
        return pts[:, :3]
    seq = list(points)
    if not seq:
        return np.zeros((0, 3))
    if hasattr(seq[0], "as_array"):
        return np.stack([p.as_array() for p in seq])
    return np.asarray(seq, dtype=np.float64)[:, :3]


def _canonical_sort(pts):
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    return pts[order]


def _nearest_in_radius(tree_pts, queries, radius):
    """Nearest tree point per query within ``radius`` (inclusive).

    Distances are recomputed in float64 from coordinates; exact ties pick
    the smallest index in ``tree_pts`` order.  Returns (index, matched).
    index is -1 where unmatched.
    """
    n = tree_pts.shape[0]
    q = queries.shape[0]
    best = np.full(q, -1, dtype=np.int64)
    if n == 0 or q == 0:
        return best, np.zeros(q, dtype=bool)
    tree = cKDTree(tree_pts)
    k = min(8, n)
    _, idx = tree.query(queries, k=k)
    idx = idx.reshape(q, k)
    cand = tree_pts[idx]  # (q, k, 2)
    d2 = (cand[..., 0] - queries[:, None, 0]) ** 2 + (cand[..., 1] - queries[:, None, 1]) ** 2
    within = d2 <= radius * radius
    d2 = np.where(within, d2, np.inf)
    best_d2 = d2.min(axis=1)
    matched = np.isfinite(best_d2)
    # smallest candidate index among exact-distance ties
    tied = d2 <= best_d2[:, None]
    idx_masked = np.where(tied, idx, np.iinfo(np.int64).max)
    best = idx_masked.min(axis=1)
    best[~matched] = -1
    return best, matched


def build_correspondence_map(
    points_true,
    points_pseudo,
    calib: CalibrationProfile,
    bev_cfg: VoxelGridConfig,
    image_map_shape,
    image_stride: float = 4.0,
    radius: float = DEFAULT_SEARCH_RADIUS,
) -> CorrespondenceMap:
    """Link each BEV cell to its nearest point and that point's image cell.

    True returns are matched first (2D x-y distance, inclusive radius);
    only cells with no true match fall back to pseudo-points, so pseudo
    data never displaces a real measurement.  The chosen point is projected
    through ``calib``; cells whose point lands behind the camera or outside
    the feature map keep no record.
    """
    if radius <= 0:
        raise ConfigError(f"radius must be positive, got {radius}")
    if image_stride <= 0:
        raise ConfigError(f"image_stride must be positive, got {image_stride}")
    rows, cols = (int(n) for n in image_map_shape)
    if rows < 1 or cols < 1:
        raise ConfigError(f"image_map_shape must be positive, got {image_map_shape}")

    true_pts = _canonical_sort(_as_xyz(points_true))
    pseudo_pts = _canonical_sort(_as_xyz(points_pseudo))

    xs, ys = bev_cfg.cell_samples_xy()
    ny, nx = bev_cfg.ny, bev_cfg.nx
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    cells = np.stack([cx.reshape(-1), cy.reshape(-1)], axis=1)

    idx_true, got_true = _nearest_in_radius(true_pts[:, :2], cells, radius)
    idx_pseudo, got_pseudo = _nearest_in_radius(pseudo_pts[:, :2], cells, radius)

    source = np.zeros(cells.shape[0], dtype=np.int8)
    point_index = np.full(cells.shape[0], -1, dtype=np.int64)
    matched_xyz = np.zeros((cells.shape[0], 3))

    source[got_pseudo] = SOURCE_PSEUDO
    point_index[got_pseudo] = idx_pseudo[got_pseudo]
    if pseudo_pts.size:
        matched_xyz[got_pseudo] = pseudo_pts[idx_pseudo[got_pseudo]]
    source[got_true] = SOURCE_TRUE
    point_index[got_true] = idx_true[got_true]
    if true_pts.size:
        matched_xyz[got_true] = true_pts[idx_true[got_true]]

    any_match = source != SOURCE_NONE
    if np.any(any_match):
        cam = transform_points_to_camera(matched_xyz[any_match], calib)
        pixels, in_front = project_points_to_image(cam, calib)
        r = pixels[:, 1] / image_stride
        c = pixels[:, 0] / image_stride
        with np.errstate(invalid="ignore"):
            inside = in_front & (r >= 0) & (r <= rows - 1) & (c >= 0) & (c <= cols - 1)
        drop = np.flatnonzero(any_match)[~inside]
        source[drop] = SOURCE_NONE
        point_index[drop] = -1
        matched_xyz[drop] = 0.0

    matched = source != SOURCE_NONE
    image_position = np.zeros((cells.shape[0], 2))
    if np.any(matched):
        cam = transform_points_to_camera(matched_xyz[matched], calib)
        pixels, _ = project_points_to_image(cam, calib)
        image_position[matched, 0] = pixels[:, 1] / image_stride
        image_position[matched, 1] = pixels[:, 0] / image_stride

    geometric = np.zeros((cells.shape[0], 3))
    geometric[matched, 0] = matched_xyz[matched, 0] - cells[matched, 0]
    geometric[matched, 1] = matched_xyz[matched, 1] - cells[matched, 1]
    geometric[matched, 2] = matched_xyz[matched, 2]

    return CorrespondenceMap(
        source.reshape(ny, nx),
        image_position.reshape(ny, nx, 2),
        geometric.reshape(ny, nx, 3),
        point_index.reshape(ny, nx),
        (rows, cols),
    )


def continuous_fuse(
    bev: FeatureMap,
    image: FeatureMap,
    corr: CorrespondenceMap,
    mlp: FusionMLP,
    geometry_mode: str = "offset",
) -> FeatureMap:
    """Add MLP-transformed image features onto matched BEV cells.

    ``geometry_mode`` selects the geometric input appended to the sampled
    image features: "offset" (the 3-vector cell-to-point offset, default)
    or "distance" (its scalar 2D norm).  Unmatched cells pass through
    unchanged.
    """
    if geometry_mode not in ("offset", "distance"):
        raise ConfigError(f"unknown geometry_mode {geometry_mode!r}")
    geom_dim = 3 if geometry_mode == "offset" else 1
    if corr.image_map_shape != (image.rows, image.cols):
        raise ConfigError(
            f"correspondence map was built for {corr.image_map_shape}, "
            f"image map is {(image.rows, image.cols)}"
        )
    if mlp.input_size != image.channels + geom_dim:
        raise ConfigError(
            f"MLP input {mlp.input_size} != image channels {image.channels} + {geom_dim}"
        )
    if mlp.output_size != bev.channels:
        raise ConfigError(f"MLP output {mlp.output_size} != BEV channels {bev.channels}")
    if (bev.rows, bev.cols) != corr.source.shape:
        raise ConfigError(
            f"BEV map {(bev.rows, bev.cols)} does not match correspondence {corr.source.shape}"
        )

    matched = corr.matched
    out = bev.values.astype(np.float64)
    if np.any(matched):
        pos = corr.image_position[matched]
        sampled = bilinear_gather(image.values, pos[:, 0], pos[:, 1]).T  # (B, C_img)
        geo = corr.geometric_feature[matched]
        if geometry_mode == "distance":
            geo = np.hypot(geo[:, 0], geo[:, 1])[:, None]
        fused = mlp_forward_batch(mlp, np.concatenate([sampled, geo], axis=1))  # (B, C_bev)
        rr, cc = np.nonzero(matched)
        out[:, rr, cc] += fused.T
    return FeatureMap(out.astype(np.float32), stride=bev.stride, origin=bev.origin)
