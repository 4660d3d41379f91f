"""End-to-end orchestration: ground, voxelize, fuse, detect, NMS, ROI, eval.

The detector is a pluggable callable ``detector(frame, context) ->
detections``; the bundled :class:`OracleDetector` emits the frame's own
ground-truth boxes with configurable center noise, which makes every
downstream stage testable without trained weights.  Detectors work in
ground-relative height; the pipeline restores absolute height before NMS.

Determinism: every stage is a pure function of the frame and config, the
oracle detector derives its noise stream from (seed, frame_id) only, and
multi-frame runs reduce in frame_id order, so results are byte-identical
for any worker count.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depthmap import build_sparse_depth_image, densify_pseudo_points
from .errors import ConfigError, PipelineError
from .evaluation import EvalConfig, Difficulty, evaluate_frames, format_report_table, report_to_json
from .fusion import (
    DEFAULT_SEARCH_RADIUS,
    FusionMLP,
    aggregate_multiscale,
    build_correspondence_map,
    continuous_fuse,
    load_mlp,
)
from .geometry import Box2D, Box3D, transform_points_to_ego, wrap_angle_pi
from .ground import _cells_2d, estimate_ground_baseline, make_ground_relative, restore_ground_height
from .iou import rotated_iou_matrix
from .kitti_io import LabelRecord
from .losses import LossWeights
from .nms import DEFAULT_IOU_THRESHOLD, DEFAULT_SCORE_THRESHOLD, Detection, oriented_nms
from .roi import DEFAULT_GRID_N, OrientedROI, encode_refinement_offsets, extract_oriented_roi
from .scene import CLASS_NAMES
from .stubs import stub_bev_map, stub_image_maps
from .voxelize import VoxelGridConfig, voxelize_trilinear

__all__ = [
    "PipelineConfig",
    "OracleDetector",
    "PipelineResult",
    "run_pipeline",
    "run_frames",
    "evaluate_results",
    "write_results",
]

_GEOMETRY_MODES = ("offset", "distance")
_PLACEHOLDER_RECT = Box2D.from_bounds(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the end-to-end run, JSON-serializable."""

    grid: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    fusion_radius: float = DEFAULT_SEARCH_RADIUS
    image_stride: int = 4
    geometry_mode: str = "offset"
    mlp_file: str | None = None
    mlp_hidden: int = 64
    mlp_seed: int = 0
    roi_grid_n: int = DEFAULT_GRID_N
    loss_weights: LossWeights = field(default_factory=LossWeights)
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_iou: float = DEFAULT_IOU_THRESHOLD
    eval_overlap: str = "bev"
    eval_iou_thresholds: tuple = (0.5, 0.7)
    eval_difficulties: tuple = ("easy", "moderate", "hard")
    depth_stride: int = 4
    threads: int = 1

    def __post_init__(self):
        if not isinstance(self.grid, VoxelGridConfig):
            object.__setattr__(self, "grid", VoxelGridConfig.from_dict(self.grid))
        if not float(self.fusion_radius) > 0:
            raise ConfigError(f"fusion_radius must be positive, got {self.fusion_radius}")
        if int(self.image_stride) < 1:
            raise ConfigError(f"image_stride must be >= 1, got {self.image_stride}")
        object.__setattr__(self, "image_stride", int(self.image_stride))
        if self.geometry_mode not in _GEOMETRY_MODES:
            raise ConfigError(f"geometry_mode must be one of {_GEOMETRY_MODES}")
        if int(self.mlp_hidden) < 1:
            raise ConfigError(f"mlp_hidden must be >= 1, got {self.mlp_hidden}")
        if int(self.roi_grid_n) < 1:
            raise ConfigError(f"roi_grid_n must be >= 1, got {self.roi_grid_n}")
        if not isinstance(self.loss_weights, LossWeights):
            lw = dict(self.loss_weights)
            object.__setattr__(self, "loss_weights", LossWeights(**lw))
        if not 0.0 <= float(self.score_threshold) <= 1.0:
            raise ConfigError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if not 0.0 < float(self.nms_iou) <= 1.0:
            raise ConfigError(f"nms_iou must be in (0, 1], got {self.nms_iou}")
        # validated for side effects only; evaluation happens per tier later
        for thr in self.eval_iou_thresholds:
            EvalConfig(self.eval_overlap, float(thr), "hard")
        if self.eval_overlap == "2d":
            raise ConfigError("pipeline evaluation works on 3D detections; use bev or 3d")
        diffs = tuple(str(d).lower() for d in self.eval_difficulties)
        for d in diffs:
            Difficulty.parse(d)
        object.__setattr__(self, "eval_difficulties", diffs)
        object.__setattr__(
            self, "eval_iou_thresholds", tuple(float(t) for t in self.eval_iou_thresholds)
        )
        if int(self.depth_stride) < 1:
            raise ConfigError(f"depth_stride must be >= 1, got {self.depth_stride}")
        if int(self.threads) < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        for name in ("image_stride", "mlp_hidden", "mlp_seed", "roi_grid_n", "depth_stride", "threads"):
            object.__setattr__(self, name, int(getattr(self, name)))
        object.__setattr__(self, "fusion_radius", float(self.fusion_radius))
        object.__setattr__(self, "score_threshold", float(self.score_threshold))
        object.__setattr__(self, "nms_iou", float(self.nms_iou))

    @property
    def pyramid_strides(self):
        s = self.image_stride
        return (s, 2 * s, 4 * s, 8 * s)

    def make_mlp(self, image_channels, bev_channels) -> FusionMLP:
        """Load the configured MLP file, or build a seeded default."""
        geom_dim = 3 if self.geometry_mode == "offset" else 1
        in_size = image_channels + geom_dim
        if self.mlp_file is not None:
            mlp = load_mlp(self.mlp_file)
            if mlp.input_size != in_size or mlp.output_size != bev_channels:
                raise ConfigError(
                    f"MLP file maps {mlp.input_size}->{mlp.output_size}, "
                    f"pipeline needs {in_size}->{bev_channels}"
                )
            return mlp
        return FusionMLP.create([in_size, self.mlp_hidden, bev_channels], seed=self.mlp_seed)

    def to_dict(self):
        return {
            "grid": self.grid.to_dict(),
            "fusion": {
                "radius": self.fusion_radius,
                "image_stride": self.image_stride,
                "geometry_mode": self.geometry_mode,
                "mlp_file": self.mlp_file,
                "mlp_hidden": self.mlp_hidden,
                "mlp_seed": self.mlp_seed,
            },
            "roi": {"grid_n": self.roi_grid_n},
            "loss_weights": {
                "regression": self.loss_weights.regression,
                "depth": self.loss_weights.depth,
            },
            "nms": {"score_threshold": self.score_threshold, "iou_threshold": self.nms_iou},
            "eval": {
                "overlap_kind": self.eval_overlap,
                "iou_thresholds": list(self.eval_iou_thresholds),
                "difficulties": list(self.eval_difficulties),
            },
            "depth_stride": self.depth_stride,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError(f"config must be an object, got {type(d).__name__}")
        known = {"grid", "fusion", "roi", "loss_weights", "nms", "eval", "depth_stride", "threads"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def section(name, allowed):
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in config section {name!r}: {sorted(bad)}")
            return sec

        fusion = section("fusion", {"radius", "image_stride", "geometry_mode", "mlp_file", "mlp_hidden", "mlp_seed"})
        roi = section("roi", {"grid_n"})
        lw = section("loss_weights", {"regression", "depth"})
        nms = section("nms", {"score_threshold", "iou_threshold"})
        ev = section("eval", {"overlap_kind", "iou_thresholds", "difficulties"})
        kwargs = {}
        if "grid" in d:
            kwargs["grid"] = VoxelGridConfig.from_dict(d["grid"])
        if "radius" in fusion:
            kwargs["fusion_radius"] = fusion["radius"]
        if "image_stride" in fusion:
            kwargs["image_stride"] = fusion["image_stride"]
        if "geometry_mode" in fusion:
            kwargs["geometry_mode"] = fusion["geometry_mode"]
        if "mlp_file" in fusion:
            kwargs["mlp_file"] = fusion["mlp_file"]
        if "mlp_hidden" in fusion:
            kwargs["mlp_hidden"] = fusion["mlp_hidden"]
        if "mlp_seed" in fusion:
            kwargs["mlp_seed"] = fusion["mlp_seed"]
        if "grid_n" in roi:
            kwargs["roi_grid_n"] = roi["grid_n"]
        if lw:
            kwargs["loss_weights"] = LossWeights(**lw)
        if "score_threshold" in nms:
            kwargs["score_threshold"] = nms["score_threshold"]
        if "iou_threshold" in nms:
            kwargs["nms_iou"] = nms["iou_threshold"]
        if "overlap_kind" in ev:
            kwargs["eval_overlap"] = ev["overlap_kind"]
        if "iou_thresholds" in ev:
            kwargs["eval_iou_thresholds"] = tuple(ev["iou_thresholds"])
        if "difficulties" in ev:
            kwargs["eval_difficulties"] = tuple(ev["difficulties"])
        if "depth_stride" in d:
            kwargs["depth_stride"] = d["depth_stride"]
        if "threads" in d:
            kwargs["threads"] = d["threads"]
        return cls(**kwargs)


@dataclass(frozen=True)
class OracleDetector:
    """Reference detector: emits the frame's GT boxes with seeded noise.

    Noise is a common-random-numbers stream keyed by (seed, frame_id): the
    same standard-normal draws are scaled by ``noise_sigma``, so sweeping
    sigma changes only the magnitude of each perturbation, never the
    directions or the scores.  Centers are perturbed in x and y; output
    heights are ground-relative per the detector contract.
    """

    noise_sigma: float = 0.0
    score_range: tuple = (0.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not float(self.noise_sigma) >= 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        lo, hi = (float(v) for v in self.score_range)
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"score_range must satisfy 0 <= lo <= hi <= 1, got {self.score_range}")
        object.__setattr__(self, "score_range", (lo, hi))

    def __call__(self, frame, context):
        ground = context["ground"]
        rng = np.random.default_rng([int(self.seed), zlib.crc32(frame.frame_id.encode())])
        lo, hi = self.score_range
        detections = []
        for gt in frame.labels:
            eps = rng.standard_normal(2)
            score = rng.uniform(lo, hi)
            b = gt.box3d
            x = b.x + self.noise_sigma * eps[0]
            y = b.y + self.noise_sigma * eps[1]
            z = b.z - _ground_at(ground, x, y)
            detections.append(
                Detection(Box3D(x, y, z, b.w, b.l, b.h, b.yaw), score, class_id=gt.class_id)
            )
        return detections


def _ground_at(ground, x, y):
    """Ground height at one (x, y), 0.0 when off-grid.

    Uses the same cell lookup as restore_ground_height so a subtract here
    and a restore there cancel to within one rounding.
    """
    ix, iy, ok = _cells_2d(np.array([[x, y, 0.0]]), ground.grid)
    if ok[0]:
        return float(ground.heights[iy[0], ix[0]])
    return 0.0


@dataclass(frozen=True)
class PipelineResult:
    """Everything one frame produced; heavy arrays only when requested."""

    frame_id: str
    labels: tuple
    detections: tuple
    raw_detection_count: int
    pseudo_count: int
    correspondence_counts: dict
    roi_features: tuple
    refinement_offsets: tuple
    ground: object = None
    bev: object = None
    fused: object = None


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def run_pipeline(frame, cfg: PipelineConfig, detector=None, keep_arrays=False) -> PipelineResult:
    """Run every stage on one frame; stage failures carry the stage name."""
    if detector is None:
        detector = OracleDetector()

    ground = _stage("ground", estimate_ground_baseline, frame.points, cfg.grid)
    rel_points, _ = _stage("ground_relative", make_ground_relative, frame.points, ground)
    bev_tensor = _stage("voxelize", voxelize_trilinear, rel_points, cfg.grid)
    sparse = _stage("sparse_depth", build_sparse_depth_image, frame.points, frame.calib)

    if frame.dense_depth is not None:
        pseudo_cam = _stage(
            "pseudo_points", densify_pseudo_points, frame.dense_depth, sparse, frame.calib, cfg.depth_stride
        )
        pseudo_ego = transform_points_to_ego(pseudo_cam, frame.calib)
    else:
        pseudo_ego = np.zeros((0, 3))

    image_maps = _stage("image_features", stub_image_maps, frame, cfg.pyramid_strides)
    bev_map = _stage("bev_features", stub_bev_map, frame, cfg.grid)
    aggregated = _stage("aggregate", aggregate_multiscale, image_maps)

    corr = _stage(
        "correspondence",
        build_correspondence_map,
        frame.points[:, :3],
        pseudo_ego,
        frame.calib,
        cfg.grid,
        (aggregated.rows, aggregated.cols),
        float(cfg.image_stride),
        cfg.fusion_radius,
    )
    mlp = _stage("fusion_mlp", cfg.make_mlp, aggregated.channels, bev_map.channels)
    fused = _stage("fuse", continuous_fuse, bev_map, aggregated, corr, mlp, cfg.geometry_mode)

    context = {
        "ground": ground,
        "grid": cfg.grid,
        "bev_tensor": bev_tensor,
        "fused": fused,
        "correspondence": corr,
        "config": cfg,
    }
    raw = _stage("detect", detector, frame, context)
    raw = list(raw)
    for det in raw:
        if not isinstance(det, Detection):
            raise PipelineError("detect", TypeError(f"detector returned {type(det).__name__}"))

    restored_boxes, _ = _stage("restore_height", restore_ground_height, [d.box for d in raw], ground)
    restored = [
        Detection(box, d.score, d.class_id) for box, d in zip(restored_boxes, raw)
    ]
    kept = _stage("nms", oriented_nms, restored, cfg.score_threshold, cfg.nms_iou)

    rois = []
    for det in kept:
        roi = OrientedROI.from_box(det.box.bev(), cfg.roi_grid_n)
        rois.append(_stage("roi", extract_oriented_roi, fused, roi))

    offsets = []
    if kept and frame.labels:
        det_params = np.array([[d.box.x, d.box.y, d.box.w, d.box.l, d.box.yaw] for d in kept])
        gt_params = np.array(
            [[g.box3d.x, g.box3d.y, g.box3d.w, g.box3d.l, g.box3d.yaw] for g in frame.labels]
        )
        ious = _stage("refine_targets", rotated_iou_matrix, det_params, gt_params)
        for i, det in enumerate(kept):
            j = int(np.argmax(ious[i]))
            if ious[i, j] > 0.0:
                offsets.append(encode_refinement_offsets(det.box, frame.labels[j].box3d))
            else:
                offsets.append(None)
    else:
        offsets = [None] * len(kept)

    src = corr.source
    counts = {
        "true": int(np.count_nonzero(src == 1)),
        "pseudo": int(np.count_nonzero(src == 2)),
        "unmatched": int(np.count_nonzero(src == 0)),
    }
    return PipelineResult(
        frame_id=frame.frame_id,
        labels=tuple(frame.labels),
        detections=tuple(kept),
        raw_detection_count=len(raw),
        pseudo_count=int(pseudo_ego.shape[0]),
        correspondence_counts=counts,
        roi_features=tuple(rois),
        refinement_offsets=tuple(offsets),
        ground=ground if keep_arrays else None,
        bev=bev_tensor if keep_arrays else None,
        fused=fused if keep_arrays else None,
    )


def run_frames(frames, cfg: PipelineConfig, detector=None, threads=None, keep_arrays=False):
    """Run frames across a worker pool; results come back sorted by frame_id."""
    frames = list(frames)
    n_workers = int(threads) if threads is not None else cfg.threads
    if n_workers < 1:
        raise ConfigError(f"threads must be >= 1, got {n_workers}")
    if n_workers == 1 or len(frames) <= 1:
        results = [run_pipeline(f, cfg, detector, keep_arrays) for f in frames]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(lambda f: run_pipeline(f, cfg, detector, keep_arrays), frames))
    return sorted(results, key=lambda r: r.frame_id)


def evaluate_results(results, cfg: PipelineConfig):
    """Pooled AP reports over every configured difficulty and IoU threshold."""
    results = sorted(results, key=lambda r: r.frame_id)
    dets = [list(r.detections) for r in results]
    gts = [list(r.labels) for r in results]
    reports = []
    for diff in cfg.eval_difficulties:
        for thr in cfg.eval_iou_thresholds:
            ec = EvalConfig(cfg.eval_overlap, thr, diff)
            reports.extend(evaluate_frames(dets, gts, ec, class_names=CLASS_NAMES))
    return reports


def write_results(out_dir, results, reports):
    """Write per-frame detection files plus the JSON and text reports.

    Detection files use the label format with a trailing score; their 2D
    rect is a fixed placeholder since detections carry no image box.
    Output bytes depend only on (sorted) results, never on worker count.
    """
    out = Path(out_dir)
    det_dir = out / "detections"
    det_dir.mkdir(parents=True, exist_ok=True)
    from .kitti_io import write_labels

    for res in sorted(results, key=lambda r: r.frame_id):
        records = []
        for det in res.detections:
            records.append(
                LabelRecord(
                    class_name=CLASS_NAMES.get(det.class_id, str(det.class_id)),
                    truncation=0.0,
                    occlusion=0,
                    alpha=float(wrap_angle_pi(det.box.yaw - math.atan2(det.box.y, det.box.x))),
                    box2d=_PLACEHOLDER_RECT,
                    box3d=det.box,
                    score=det.score,
                )
            )
        write_labels(det_dir / f"{res.frame_id}.txt", records)
    (out / "report.json").write_text(report_to_json(reports))
    (out / "report.txt").write_text(format_report_table(reports))
    return out
