"""Score thresholding and greedy non-maximum suppression on oriented boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import Box3D
from .iou import rotated_iou_matrix

__all__ = ["Detection", "oriented_nms"]

DEFAULT_SCORE_THRESHOLD = 0.2
DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Detection:
    """A scored 3D detection."""

    box: Box3D
    score: float
    class_id: int = 0

    def __post_init__(self):
        score = float(self.score)
        if not np.isfinite(score) or not 0.0 <= score <= 1.0:
            raise ConfigError(f"score must be in [0, 1], got {score!r}")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "class_id", int(self.class_id))


def _bev_params(dets):
    out = np.empty((len(dets), 5))
    for i, d in enumerate(dets):
        out[i] = (d.box.x, d.box.y, d.box.w, d.box.l, d.box.yaw)
    return out


def oriented_nms(
    detections,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
):
    """Greedy suppression by rotated BEV overlap.

    Detections below ``score_threshold`` are dropped first.  Survivors are
    visited in descending score (ties keep input order); each kept detection
    suppresses later ones whose BEV IoU with it is >= ``iou_threshold``.
    Returns a new list sorted by descending score.  Suppression is keyed on
    BEV overlap only; z extents never matter here.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ConfigError(f"score_threshold must be in [0, 1], got {score_threshold}")
    if not 0.0 < iou_threshold <= 1.0:
        raise ConfigError(f"iou_threshold must be in (0, 1], got {iou_threshold}")

    kept_in = [d for d in detections if d.score >= score_threshold]
    if not kept_in:
        return []

    scores = np.array([d.score for d in kept_in])
    order = np.argsort(-scores, kind="stable")
    params = _bev_params(kept_in)[order]

    alive = np.ones(len(kept_in), dtype=bool)
    kept = []
    for i in range(len(kept_in)):
        if not alive[i]:
            continue
        kept.append(kept_in[int(order[i])])
        later = np.nonzero(alive[i + 1 :])[0] + i + 1
        if later.size == 0:
            continue
        ious = rotated_iou_matrix(params[i : i + 1], params[later])[0]
        alive[later[ious >= iou_threshold]] = False
    return kept
