"""Detection benchmark evaluation: difficulty tiers, matching, 11-point AP.

Ground-truth objects are split per difficulty tier into *counted* and
*ignored* sets (by projected 2D height, occlusion level and truncation).
Detections are matched greedily in descending score to the unmatched
counted GT with the highest overlap above threshold; a detection whose only
qualifying overlap is with an ignored GT is itself ignored (it neither
scores nor penalizes, and ignored GT are never consumed).  Average
precision interpolates the precision envelope at the 11 recall points
0.0, 0.1, ..., 1.0.

Overlap flavors: axis-aligned 2D (image boxes), rotated BEV footprints, or
full 3D volumes.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import Box2D, Box3D
from .iou import iou3d_pairs, rotated_iou_pairs

__all__ = [
    "Difficulty",
    "GroundTruthObject",
    "EvalConfig",
    "PRCurve",
    "ApResult",
    "DET_TP",
    "DET_FP",
    "DET_IGNORED",
    "difficulty_filter",
    "overlap_matrix",
    "match_detections",
    "ap_11point",
    "evaluate_frames",
    "report_to_json",
    "format_report_table",
]

logger = logging.getLogger(__name__)

DET_FP = 0
DET_TP = 1
DET_IGNORED = 2

RECALL_SAMPLES = 11


class Difficulty(enum.Enum):
    """Benchmark difficulty tiers with (min height px, max occlusion, max truncation)."""

    EASY = (40.0, 0, 0.15)
    MODERATE = (25.0, 1, 0.30)
    HARD = (25.0, 2, 0.50)

    @property
    def min_height(self):
        return self.value[0]

    @property
    def max_occlusion(self):
        return self.value[1]

    @property
    def max_truncation(self):
        return self.value[2]

    @classmethod
    def parse(cls, name):
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ConfigError(f"unknown difficulty {name!r}") from None


@dataclass(frozen=True)
class GroundTruthObject:
    """An annotated object with both its 3D box and its image-plane box."""

    box3d: Box3D
    box2d: Box2D
    truncation: float = 0.0
    occlusion: int = 0
    class_id: int = 0

    def __post_init__(self):
        t = float(self.truncation)
        if not math.isfinite(t) or not 0.0 <= t <= 1.0:
            raise ConfigError(f"truncation must be in [0, 1], got {t!r}")
        occ = int(self.occlusion)
        if occ not in (0, 1, 2, 3):
            raise ConfigError(f"occlusion must be one of 0..3, got {occ}")
        object.__setattr__(self, "truncation", t)
        object.__setattr__(self, "occlusion", occ)
        object.__setattr__(self, "class_id", int(self.class_id))


def difficulty_filter(gt: GroundTruthObject, level: Difficulty) -> bool:
    """True when the object is counted at this tier, False when ignored."""
    if not isinstance(level, Difficulty):
        level = Difficulty.parse(level)
    return (
        gt.box2d.h >= level.min_height
        and gt.occlusion <= level.max_occlusion
        and gt.truncation <= level.max_truncation
    )


_OVERLAP_KINDS = ("2d", "bev", "3d")


@dataclass(frozen=True)
class EvalConfig:
    """Overlap flavor, per-class IoU thresholds, and difficulty tier.

    ``iou_threshold`` is a float applied to every class, or a mapping from
    class_id to threshold.
    """

    overlap_kind: str = "bev"
    iou_threshold: object = 0.7
    difficulty: Difficulty = Difficulty.HARD

    def __post_init__(self):
        kind = str(self.overlap_kind).lower()
        if kind not in _OVERLAP_KINDS:
            raise ConfigError(f"overlap_kind must be one of {_OVERLAP_KINDS}, got {kind!r}")
        object.__setattr__(self, "overlap_kind", kind)
        if not isinstance(self.difficulty, Difficulty):
            object.__setattr__(self, "difficulty", Difficulty.parse(self.difficulty))
        thr = self.iou_threshold
        items = thr.items() if hasattr(thr, "items") else [(None, thr)]
        for _, v in items:
            v = float(v)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"iou thresholds must be in (0, 1], got {v}")

    def threshold_for(self, class_id):
        if hasattr(self.iou_threshold, "items"):
            try:
                return float(self.iou_threshold[class_id])
            except KeyError:
                raise ConfigError(f"no IoU threshold configured for class {class_id}") from None
        return float(self.iou_threshold)


def _boxes3d_params(boxes):
    return np.array([[b.x, b.y, b.z, b.w, b.l, b.h, b.yaw] for b in boxes]).reshape(-1, 7)


def overlap_matrix(det_boxes, gt_objects, kind):
    """(n_det, n_gt) IoU matrix under the configured overlap flavor.

    ``det_boxes`` are Box3D for "bev"/"3d" and Box2D for "2d"; GT supply the
    corresponding box from their record.
    """
    n_det, n_gt = len(det_boxes), len(gt_objects)
    if n_det == 0 or n_gt == 0:
        return np.zeros((n_det, n_gt))
    if kind == "2d":
        d = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in det_boxes])
        g = np.array([[o.box2d.x_min, o.box2d.y_min, o.box2d.x_max, o.box2d.y_max] for o in gt_objects])
        iw = np.minimum(d[:, None, 2], g[None, :, 2]) - np.maximum(d[:, None, 0], g[None, :, 0])
        ih = np.minimum(d[:, None, 3], g[None, :, 3]) - np.maximum(d[:, None, 1], g[None, :, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        area_d = (d[:, 2] - d[:, 0]) * (d[:, 3] - d[:, 1])
        area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
        union = area_d[:, None] + area_g[None, :] - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(union > 0, inter / union, 0.0)
        return np.clip(out, 0.0, 1.0)
    dp = _boxes3d_params(det_boxes)
    gp = _boxes3d_params([o.box3d for o in gt_objects])
    rep_d = np.repeat(dp, n_gt, axis=0)
    rep_g = np.tile(gp, (n_det, 1))
    if kind == "bev":
        vals = rotated_iou_pairs(rep_d[:, [0, 1, 3, 4, 6]], rep_g[:, [0, 1, 3, 4, 6]])
    elif kind == "3d":
        vals = iou3d_pairs(rep_d, rep_g)
    else:
        raise ConfigError(f"unknown overlap kind {kind!r}")
    return vals.reshape(n_det, n_gt)


def match_detections(detections, gt_objects, cfg: EvalConfig):
    """Flag every detection of one frame/class as TP, FP, or ignored.

    Inputs must already be restricted to a single frame and a single class.
    Detections are processed in descending score (ties keep input order);
    each claims the unmatched *counted* GT with the highest IoU >= the
    class threshold (ties to the lowest GT index).  Failing that, an IoU
    above threshold with any ignored GT marks the detection ignored;
    otherwise it is a false positive.  Flags are returned in input order.
    """
    detections = list(detections)
    gt_objects = list(gt_objects)
    flags = np.full(len(detections), DET_FP, dtype=np.int8)
    if not detections:
        return flags
    threshold = cfg.threshold_for(detections[0].class_id)

    counted = np.array([difficulty_filter(g, cfg.difficulty) for g in gt_objects], dtype=bool)
    if cfg.overlap_kind == "2d":
        det_boxes = []
        for det in detections:
            rect = getattr(det, "box2d", None)
            if rect is None:
                raise ConfigError("2D evaluation needs detections with a box2d attribute")
            det_boxes.append(rect)
        ious = overlap_matrix(det_boxes, gt_objects, "2d")
    else:
        ious = overlap_matrix([d.box for d in detections], gt_objects, cfg.overlap_kind)

    scores = np.array([d.score for d in detections])
    order = np.argsort(-scores, kind="stable")
    gt_taken = np.zeros(len(gt_objects), dtype=bool)
    for di in order:
        row = ious[di]
        best_gt = -1
        best_iou = -1.0
        for gi in range(len(gt_objects)):
            if not counted[gi] or gt_taken[gi]:
                continue
            # strict > keeps the lowest GT index on exact ties
            if row[gi] >= threshold and row[gi] > best_iou:
                best_gt = gi
                best_iou = row[gi]
        if best_gt >= 0:
            gt_taken[best_gt] = True
            flags[di] = DET_TP
            continue
        ignored_hit = any(
            (not counted[gi]) and row[gi] >= threshold for gi in range(len(gt_objects))
        )
        flags[di] = DET_IGNORED if ignored_hit else DET_FP
    return flags


@dataclass(frozen=True)
class PRCurve:
    """Raw PR sweep points plus the 11 interpolated samples."""

    recalls: np.ndarray
    precisions: np.ndarray
    sample_recalls: np.ndarray
    sample_precisions: np.ndarray

    def __post_init__(self):
        rec = np.asarray(self.recalls, dtype=np.float64)
        pre = np.asarray(self.precisions, dtype=np.float64)
        if rec.shape != pre.shape or rec.ndim != 1:
            raise ConfigError("recalls and precisions must be parallel 1D arrays")
        if rec.size and (not np.all(np.isfinite(rec)) or not np.all(np.isfinite(pre))):
            raise ConfigError("PR points must be finite")
        if rec.size > 1 and np.any(np.diff(rec) < 0):
            raise ConfigError("recalls must be non-decreasing")
        object.__setattr__(self, "recalls", rec)
        object.__setattr__(self, "precisions", pre)
        object.__setattr__(self, "sample_recalls", np.asarray(self.sample_recalls, dtype=np.float64))
        object.__setattr__(self, "sample_precisions", np.asarray(self.sample_precisions, dtype=np.float64))


@dataclass(frozen=True)
class ApResult:
    ap: float
    curve: PRCurve
    zero_gt: bool = False


def ap_11point(scores, flags, total_counted_gt) -> ApResult:
    """11-point interpolated average precision over the pooled detections.

    ``scores``/``flags`` are parallel arrays pooled over all frames (flags
    from :func:`match_detections`); ``total_counted_gt`` is the pooled
    counted-GT count.  Ignored detections are skipped by the sweep.  With
    zero counted GT the AP is defined as 0 and flagged.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    flags = np.asarray(flags).reshape(-1)
    if scores.shape != flags.shape:
        raise ConfigError("scores and flags must be parallel")
    total = int(total_counted_gt)
    if total < 0:
        raise ConfigError(f"total_counted_gt must be >= 0, got {total}")

    sample_r = [i / 10.0 for i in range(RECALL_SAMPLES)]
    if total == 0:
        logger.warning("AP requested with zero counted ground truth; defining AP = 0")
        curve = PRCurve(np.zeros(0), np.zeros(0), np.array(sample_r), np.zeros(RECALL_SAMPLES))
        return ApResult(0.0, curve, zero_gt=True)

    order = np.argsort(-scores, kind="stable")
    tp = 0
    fp = 0
    recalls = []
    precisions = []
    for i in order:
        f = int(flags[i])
        if f == DET_IGNORED:
            continue
        if f == DET_TP:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / total)
        precisions.append(tp / (tp + fp))

    samples = []
    for r in sample_r:
        best = 0.0
        for rec, pre in zip(recalls, precisions):
            if rec >= r and pre > best:
                best = pre
        samples.append(best)
    ap = sum(samples) / float(RECALL_SAMPLES)
    curve = PRCurve(np.array(recalls), np.array(precisions), np.array(sample_r), np.array(samples))
    return ApResult(ap, curve, zero_gt=False)


def evaluate_frames(frame_detections, frame_gts, cfg: EvalConfig, class_names=None):
    """Per-class evaluation over a frame set.

    ``frame_detections``/``frame_gts`` are parallel per-frame lists.  GT of
    other classes are excluded from a class's matching entirely; the
    difficulty tier decides counted vs ignored within the class.  Returns a
    list of per-class report dicts.
    """
    if len(frame_detections) != len(frame_gts):
        raise ConfigError("detection and GT frame lists must be parallel")
    class_ids = sorted(
        {g.class_id for gts in frame_gts for g in gts}
        | {d.class_id for dets in frame_detections for d in dets}
    )
    reports = []
    for cid in class_ids:
        scores = []
        flags = []
        total_counted = 0
        for dets, gts in zip(frame_detections, frame_gts):
            dets_c = [d for d in dets if d.class_id == cid]
            gts_c = [g for g in gts if g.class_id == cid]
            total_counted += sum(difficulty_filter(g, cfg.difficulty) for g in gts_c)
            frame_flags = match_detections(dets_c, gts_c, cfg)
            scores.extend(d.score for d in dets_c)
            flags.extend(int(f) for f in frame_flags)
        result = ap_11point(np.array(scores), np.array(flags, dtype=np.int8), total_counted)
        name = None
        if class_names is not None:
            name = class_names.get(cid)
        reports.append(
            {
                "class_id": cid,
                "class_name": name if name is not None else str(cid),
                "difficulty": cfg.difficulty.name.lower(),
                "overlap_kind": cfg.overlap_kind,
                "iou_threshold": cfg.threshold_for(cid),
                "ap": result.ap,
                "zero_gt": result.zero_gt,
                "counted_gt": total_counted,
                "pr_points": [[r, p] for r, p in zip(result.curve.recalls, result.curve.precisions)],
            }
        )
    return reports


def report_to_json(reports):
    """Deterministic JSON text for a list of report dicts."""
    return json.dumps({"results": reports}, sort_keys=True, indent=2) + "\n"


def format_report_table(reports):
    """Plain-text AP table: one row per class/overlap/threshold, columns per tier."""
    tiers = [d.name.lower() for d in Difficulty]
    cells = {}
    rows = []
    for rep in reports:
        key = (rep["class_name"], rep["overlap_kind"], rep["iou_threshold"])
        if key not in cells:
            cells[key] = {}
            rows.append(key)
        cells[key][rep["difficulty"]] = rep["ap"]
    lines = []
    header = f"{'class':<12} {'overlap':<8} {'iou':<5} " + " ".join(f"{t:>9}" for t in tiers)
    lines.append(header)
    lines.append("-" * len(header))
    for key in rows:
        name, kind, thr = key
        vals = []
        for t in tiers:
            ap = cells[key].get(t)
            vals.append(f"{100.0 * ap:>8.2f}%" if ap is not None else f"{'-':>9}")
        lines.append(f"{name:<12} {kind:<8} {thr:<5.2f} " + " ".join(vals))
    return "\n".join(lines) + "\n"
