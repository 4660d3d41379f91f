"""Command line front end.

One subcommand per capability; shared flags are ``--config`` (JSON file,
schema in docs/config_schema.json), ``--seed``, ``--threads``, and ``--out``.
Precedence is flags > config file > built-in defaults.  Exit codes: 0 on
success, 1 on a validation failure, 2 on an I/O or parse error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .depthmap import build_sparse_depth_image, write_sparse_depth
from .errors import ConfigError, GenerationError, ParseError, PipelineError
from .evaluation import EvalConfig, evaluate_frames, format_report_table, report_to_json
from .ground import estimate_ground_baseline, write_ground_map
from .kitti_io import (
    DEFAULT_CLASS_IDS,
    read_calibration,
    read_labels,
    read_point_cloud,
    write_labels,
)
from .nms import Detection, oriented_nms
from .oracles import mlp_gradcheck, mlp_kink_clearance, roi_map_gradcheck, run_all_checks
from .pipeline import OracleDetector, PipelineConfig, evaluate_results, run_frames, run_pipeline, write_results
from .scene import CLASS_NAMES, SceneSpec, augment_frame, load_frame, save_frame, synth_scene
from .tensorio import write_tensor
from .voxelize import voxelize_trilinear

__all__ = ["build_parser", "main"]


def _load_config(args) -> PipelineConfig:
    """Config resolution: start from defaults or --config, then apply flags."""
    if args.config is not None:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ParseError(f"cannot read config: {exc.strerror}", path=str(path)) from exc
        except UnicodeDecodeError as exc:
            raise ParseError(
                f"config is not UTF-8 text ({exc.reason})", path=str(path), offset=exc.start
            ) from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", path=str(path), line=exc.lineno) from exc
        cfg = PipelineConfig.from_dict(data)
    else:
        cfg = PipelineConfig()
    if getattr(args, "threads", None) is not None:
        cfg = dataclasses.replace(cfg, threads=int(args.threads))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _detections_from_records(records, path):
    dets = []
    for i, rec in enumerate(records):
        if rec.score is None:
            raise ParseError(
                f"object {i} ({rec.class_name}) has no score; detections need 16 fields",
                path=str(path),
            )
        dets.append(
            Detection(
                rec.box3d,
                rec.score,
                class_id=DEFAULT_CLASS_IDS.get(rec.class_name, -1),
            )
        )
    return dets


def cmd_voxelize(args):
    cfg = _load_config(args)
    points = read_point_cloud(args.points)
    tensor = voxelize_trilinear(points[:, :3], cfg.grid)
    out = _out_dir(args)
    write_tensor(out / "bev", tensor.values, "zyx", extra={"grid": cfg.grid.to_dict()})
    occupied = int(np.count_nonzero(tensor.values))
    print(f"voxelized {points.shape[0]} points -> {tensor.values.shape} tensor")
    print(f"occupied cells {occupied}, total mass {float(tensor.values.sum()):.3f}")
    print(f"wrote {out / 'bev.bin'}")
    return 0


def cmd_ground(args):
    cfg = _load_config(args)
    points = read_point_cloud(args.points)
    ground = estimate_ground_baseline(points[:, :3], cfg.grid)
    out = _out_dir(args)
    write_ground_map(out / "ground", ground)
    valid = int(np.count_nonzero(ground.valid))
    total = ground.heights.size
    print(f"ground map {ground.heights.shape}, {valid}/{total} cells from data")
    print(
        f"height range [{float(ground.heights.min()):.3f}, {float(ground.heights.max()):.3f}] m"
    )
    print(f"wrote {out / 'ground.bin'}")
    return 0


def cmd_depth_image(args):
    points = read_point_cloud(args.points)
    calib = read_calibration(args.calib)
    image = build_sparse_depth_image(points[:, :3], calib)
    out = _out_dir(args)
    write_sparse_depth(out / "sparse_depth", image)
    occupied = int(np.count_nonzero(image.mask))
    h, w = image.mask.shape
    print(f"sparse depth image {h}x{w}, {occupied} occupied pixels")
    print(f"wrote {out / 'sparse_depth.bin'}")
    return 0


def cmd_fuse(args):
    cfg = _load_config(args)
    frame = load_frame(args.frame)
    result = run_pipeline(frame, cfg, detector=OracleDetector(seed=args.seed), keep_arrays=True)
    out = _out_dir(args)
    write_tensor(out / "fused", result.fused.values, "cyx")
    counts = result.correspondence_counts
    print(f"frame {result.frame_id}: fused map {result.fused.values.shape}")
    print(
        f"correspondences true={counts['true']} pseudo={counts['pseudo']} "
        f"unmatched={counts['unmatched']} (pseudo points generated: {result.pseudo_count})"
    )
    print(f"wrote {out / 'fused.bin'}")
    return 0


def cmd_roi(args):
    cfg = _load_config(args)
    frame = load_frame(args.frame)
    result = run_pipeline(frame, cfg, detector=OracleDetector(seed=args.seed), keep_arrays=True)
    out = _out_dir(args)
    if result.roi_features:
        stack = np.stack([rf.values for rf in result.roi_features])
        write_tensor(out / "roi_features", stack, "ncab")
        print(
            f"frame {result.frame_id}: {stack.shape[0]} ROIs of "
            f"{stack.shape[1]} channels on a {stack.shape[2]}x{stack.shape[3]} lattice"
        )
        print(f"wrote {out / 'roi_features.bin'}")
    else:
        print(f"frame {result.frame_id}: no detections survived, no ROI features")
    return 0


def cmd_nms(args):
    cfg = _load_config(args)
    records = read_labels(args.labels)
    dets = _detections_from_records(records, args.labels)
    kept = oriented_nms(dets, cfg.score_threshold, cfg.nms_iou)
    kept_ids = {id(d) for d in kept}
    survivors = [rec for rec, det in zip(records, dets) if id(det) in kept_ids]
    out = _out_dir(args)
    write_labels(out / "nms.txt", survivors)
    print(f"{len(records)} detections -> {len(survivors)} after suppression")
    print(f"wrote {out / 'nms.txt'}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    gt_dir = Path(args.labels)
    det_dir = Path(args.detections)
    if not gt_dir.is_dir():
        raise ParseError("ground-truth directory does not exist", path=str(gt_dir))
    if not det_dir.is_dir():
        raise ParseError("detections directory does not exist", path=str(det_dir))
    frame_dets, frame_gts = [], []
    names = sorted(p.name for p in gt_dir.glob("*.txt"))
    if not names:
        raise ParseError("no .txt label files found", path=str(gt_dir))
    for name in names:
        gt_records = read_labels(gt_dir / name)
        frame_gts.append([r.to_ground_truth(DEFAULT_CLASS_IDS) for r in gt_records])
        det_path = det_dir / name
        if det_path.exists():
            frame_dets.append(_detections_from_records(read_labels(det_path), det_path))
        else:
            frame_dets.append([])
    reports = []
    for diff in cfg.eval_difficulties:
        for thr in cfg.eval_iou_thresholds:
            ec = EvalConfig(cfg.eval_overlap, thr, diff)
            reports.extend(evaluate_frames(frame_dets, frame_gts, ec, class_names=CLASS_NAMES))
    out = _out_dir(args)
    (out / "report.json").write_text(report_to_json(reports))
    table = format_report_table(reports)
    (out / "report.txt").write_text(table)
    print(f"{len(names)} frames evaluated")
    print(table, end="")
    return 0


def cmd_synth(args):
    out = _out_dir(args)
    for i in range(args.scenes):
        spec = SceneSpec(seed=args.seed + i)
        frame = synth_scene(spec)
        save_frame(out / frame.frame_id, frame)
        print(
            f"{frame.frame_id}: {frame.points.shape[0]} points, "
            f"{len(frame.labels)} objects -> {out / frame.frame_id}"
        )
    return 0


def cmd_augment(args):
    frame = load_frame(args.frame)
    augmented = augment_frame(frame, args.seed)
    out = _out_dir(args)
    save_frame(out / augmented.frame_id, augmented)
    print(f"{frame.frame_id} -> {augmented.frame_id} ({augmented.points.shape[0]} points)")
    print(f"wrote {out / augmented.frame_id}")
    return 0


def cmd_pipeline(args):
    cfg = _load_config(args)
    if args.frames:
        frames = [load_frame(p) for p in args.frames]
    else:
        frames = [synth_scene(SceneSpec(seed=args.seed + i)) for i in range(args.scenes)]
    detector = OracleDetector(noise_sigma=args.noise, seed=args.seed)
    results = run_frames(frames, cfg, detector=detector)
    reports = evaluate_results(results, cfg)
    out = write_results(_out_dir(args), results, reports)
    total_dets = sum(len(r.detections) for r in results)
    print(f"{len(results)} frames, {total_dets} detections after suppression")
    print(format_report_table(reports), end="")
    print(f"wrote {out / 'detections'}, {out / 'report.json'}, {out / 'report.txt'}")
    return 0


def cmd_gradcheck(args):
    from .fusion import FeatureMap, FusionMLP
    from .geometry import OrientedBoxBEV
    from .roi import OrientedROI

    rng = np.random.default_rng(args.seed)
    worst_roi = 0.0
    for trial in range(args.trials):
        fmap = FeatureMap(rng.standard_normal((3, 24, 24)), stride=0.5, origin=(0.0, -6.0))
        box = OrientedBoxBEV(
            float(rng.uniform(2, 10)),
            float(rng.uniform(-4, 4)),
            float(rng.uniform(1, 3)),
            float(rng.uniform(2, 5)),
            float(rng.uniform(-np.pi, np.pi)),
        )
        roi = OrientedROI.from_box(box, 5)
        worst_roi = max(worst_roi, roi_map_gradcheck(fmap, roi, seed=args.seed + trial))
    worst_mlp = 0.0
    for trial in range(args.trials):
        net = FusionMLP.create([6, 16, 4], seed=args.seed + trial)
        x = rng.standard_normal(6)
        while mlp_kink_clearance(net, x) < 1e-3:
            x = rng.standard_normal(6)
        worst_mlp = max(worst_mlp, mlp_gradcheck(net, x, seed=args.seed + trial))
    tol = 1e-4
    ok = worst_roi < tol and worst_mlp < tol
    print(f"roi adjoint   max relative error {worst_roi:.3e} ({args.trials} trials)")
    print(f"mlp gradients max relative error {worst_mlp:.3e} ({args.trials} trials)")
    print("PASS" if ok else "FAIL", f"(tolerance {tol:.0e})")
    if not ok:
        raise ConfigError("gradient check exceeded tolerance")
    return 0


def cmd_oracle_check(args):
    rows = run_all_checks(seed=args.seed, verbose=True)
    if not all(ok for _, ok, _ in rows):
        raise ConfigError("one or more oracle checks failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevfuse",
        description="Deterministic 3D detection geometry, fusion, and evaluation tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="bevfuse-out"):
        p.add_argument("--config", help="JSON config file (docs/config_schema.json)")
        p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
        p.add_argument("--threads", type=int, default=None, help="worker count override")
        p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")

    p = sub.add_parser("voxelize", help="scatter a point cloud onto the BEV grid")
    p.add_argument("points", help="little-endian float32 x,y,z,intensity file")
    common(p)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("ground", help="estimate the per-cell ground height map")
    p.add_argument("points")
    common(p)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("depth-image", help="project points into a sparse depth image")
    p.add_argument("points")
    p.add_argument("calib", help="calibration text file")
    common(p)
    p.set_defaults(func=cmd_depth_image)

    p = sub.add_parser("fuse", help="fuse image features onto the BEV grid for one frame")
    p.add_argument("frame", help="frame directory (points.bin, calib.txt, labels.txt)")
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("roi", help="extract oriented ROI features for one frame's detections")
    p.add_argument("frame")
    common(p)
    p.set_defaults(func=cmd_roi)

    p = sub.add_parser("nms", help="suppress overlapping detections in a label file")
    p.add_argument("labels", help="label file with scores (16 fields)")
    common(p)
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("eval", help="score detection files against ground truth")
    p.add_argument("--detections", required=True, help="directory of detection label files")
    p.add_argument("--labels", required=True, help="directory of ground-truth label files")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic frames")
    p.add_argument("--scenes", type=int, default=1, help="number of frames (default 1)")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="apply a seeded similarity transform to a frame")
    p.add_argument("frame")
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("pipeline", help="run the full pipeline and evaluation")
    p.add_argument("--frames", nargs="*", help="frame directories (default: synthesize)")
    p.add_argument("--scenes", type=int, default=5, help="synthetic frames when no --frames")
    p.add_argument("--noise", type=float, default=0.0, help="oracle detector center noise sigma")
    common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--trials", type=int, default=10, help="random configurations per check")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-check", help="run all brute-force oracles, print a pass/fail table")
    common(p)
    p.set_defaults(func=cmd_oracle_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.__cause__, (ParseError, OSError)) else 1
    except (ConfigError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
