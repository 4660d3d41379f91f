"""Readers and writers for the on-disk frame formats.

Three plain formats, all little-endian where binary:

* point clouds: headerless float32 quadruplets ``[x, y, z, intensity]``,
  16 bytes per record;
* labels: whitespace-separated text, 15 fields per line plus an optional
  trailing score (class name, truncation, occlusion, alpha, 2D box
  left/top/right/bottom, dimensions h/w/l, center x/y/z, yaw); numeric
  fields are written with 6 decimals and roundtrip losslessly at that
  precision;
* calibration: ``key:`` prefixed rows of floats (``P2`` 3x4 row-major,
  ``Tr_velo_to_cam`` 3x4, optional ``R0_rect`` 3x3); unknown keys are
  skipped.

Label centers and yaw are in the ego frame (x center of the box, yaw about
the up axis).  All parse failures raise :class:`ParseError` carrying the
file position (line or byte offset); no input bytes can crash a reader.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .evaluation import GroundTruthObject
from .geometry import Box2D, Box3D, CalibrationProfile, wrap_angle_pi

__all__ = [
    "POINT_RECORD_BYTES",
    "DEFAULT_CLASS_IDS",
    "DEFAULT_IMAGE_SIZE",
    "LabelRecord",
    "read_point_cloud",
    "write_point_cloud",
    "read_labels",
    "write_labels",
    "read_calibration",
    "write_calibration",
]

POINT_RECORD_BYTES = 16

DEFAULT_CLASS_IDS = {"Car": 0, "Pedestrian": 1, "Cyclist": 2}

# Used when a calibration file carries no image_size row.
DEFAULT_IMAGE_SIZE = (375, 1242)


def read_point_cloud(path):
    """Parse a point-cloud file into an (N, 4) float64 array.

    Values are exactly the float32 values stored in the file.  A length
    that is not a multiple of 16 reports the offset where the partial
    record starts; non-finite records report their record index.
    """
    path = Path(path)
    data = path.read_bytes()
    usable = len(data) - len(data) % POINT_RECORD_BYTES
    if usable != len(data):
        raise ParseError(
            f"truncated point record ({len(data) - usable} trailing bytes)",
            path=path,
            offset=usable,
        )
    # arbitrary bit patterns (signaling NaNs included) must cast silently;
    # the finiteness check below is the real gate
    with np.errstate(invalid="ignore"):
        out = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, 4)
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise ParseError(
            f"non-finite point record at index {idx}",
            path=path,
            offset=idx * POINT_RECORD_BYTES,
        )
    return out


def write_point_cloud(path, points):
    """Write an (N, 4) array as float32 records. Values must fit float32."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 4:
        raise ConfigError(f"expected an (N, 4) point array, got shape {points.shape}")
    if points.size and not np.all(np.isfinite(points)):
        raise ConfigError("point records must be finite")
    Path(path).write_bytes(np.ascontiguousarray(points, dtype="<f4").tobytes())


@dataclass(frozen=True)
class LabelRecord:
    """One label line: class string kept verbatim, boxes as geometry types."""

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    box2d: Box2D
    box3d: Box3D
    score: float | None = None

    def to_ground_truth(self, class_ids=DEFAULT_CLASS_IDS) -> GroundTruthObject:
        try:
            cid = class_ids[self.class_name]
        except KeyError:
            raise ConfigError(f"no class id mapping for {self.class_name!r}") from None
        return GroundTruthObject(
            box3d=self.box3d,
            box2d=self.box2d,
            truncation=self.truncation,
            occlusion=self.occlusion,
            class_id=cid,
        )

    @classmethod
    def from_ground_truth(cls, gt: GroundTruthObject, class_name, alpha=None, score=None):
        if alpha is None:
            alpha = wrap_angle_pi(gt.box3d.yaw - math.atan2(gt.box3d.y, gt.box3d.x))
        return cls(
            class_name=str(class_name),
            truncation=gt.truncation,
            occlusion=gt.occlusion,
            alpha=float(alpha),
            box2d=gt.box2d,
            box3d=gt.box3d,
            score=score,
        )


def _parse_float(token, path, line_no, what):
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"bad {what} value {token!r}", path=path, line=line_no) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite {what} value {token!r}", path=path, line=line_no)
    return v


def _read_text(path):
    # Binary junk must come back as a positioned parse failure, not a
    # UnicodeDecodeError escaping from read_text().
    try:
        return path.read_text()
    except UnicodeDecodeError as exc:
        raise ParseError(
            f"file is not UTF-8 text ({exc.reason})", path=path, offset=exc.start
        ) from None


def read_labels(path):
    """Parse a label file into a list of LabelRecord. Blank lines are skipped."""
    path = Path(path)
    records = []
    for line_no, line in enumerate(_read_text(path).splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise ParseError(
                f"expected 15 or 16 fields, got {len(fields)}", path=path, line=line_no
            )
        name = fields[0]
        vals = [_parse_float(tok, path, line_no, "label") for tok in fields[1:]]
        occ = vals[1]
        if occ != int(occ):
            raise ParseError(f"occlusion must be an integer, got {occ}", path=path, line=line_no)
        try:
            box2d = Box2D.from_bounds(vals[3], vals[4], vals[5], vals[6])
            h, w, l = vals[7], vals[8], vals[9]
            box3d = Box3D(vals[10], vals[11], vals[12], w, l, h, vals[13])
            record = LabelRecord(
                class_name=name,
                truncation=vals[0],
                occlusion=int(occ),
                alpha=vals[2],
                box2d=box2d,
                box3d=box3d,
                score=vals[14] if len(fields) == 16 else None,
            )
        except ConfigError as exc:
            raise ParseError(str(exc), path=path, line=line_no) from None
        records.append(record)
    return records


def _fmt(v):
    return f"{float(v):.6f}"


def write_labels(path, records):
    """Write LabelRecords one per line, floats at 6 decimals."""
    lines = []
    for rec in records:
        b2, b3 = rec.box2d, rec.box3d
        fields = [rec.class_name, _fmt(rec.truncation), str(int(rec.occlusion)), _fmt(rec.alpha)]
        fields += [_fmt(b2.x_min), _fmt(b2.y_min), _fmt(b2.x_max), _fmt(b2.y_max)]
        fields += [_fmt(b3.h), _fmt(b3.w), _fmt(b3.l)]
        fields += [_fmt(b3.x), _fmt(b3.y), _fmt(b3.z), _fmt(b3.yaw)]
        if rec.score is not None:
            fields.append(_fmt(rec.score))
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


_CALIB_COUNTS = {"P2": 12, "Tr_velo_to_cam": 12, "R0_rect": 9, "image_size": 2}


def read_calibration(path) -> CalibrationProfile:
    """Parse a calibration file.

    ``P2`` supplies the intrinsics; its fourth column (a camera-frame
    offset applied after rectification) is folded into the rigid
    transform's translation so that projection needs only the profile's
    own fields.  Unknown keys are ignored; malformed rows, missing
    required keys, and non-orthonormal rotation blocks raise positioned
    :class:`ParseError`.
    """
    path = Path(path)
    rows = {}
    for line_no, line in enumerate(_read_text(path).splitlines(), start=1):
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _CALIB_COUNTS:
            continue
        if key in rows:
            raise ParseError(f"duplicate key {key!r}", path=path, line=line_no)
        vals = [_parse_float(tok, path, line_no, key) for tok in rest.split()]
        if len(vals) != _CALIB_COUNTS[key]:
            raise ParseError(
                f"{key} needs {_CALIB_COUNTS[key]} values, got {len(vals)}",
                path=path,
                line=line_no,
            )
        rows[key] = (line_no, np.array(vals))

    for key in ("P2", "Tr_velo_to_cam"):
        if key not in rows:
            raise ParseError(f"missing required key {key!r}", path=path)

    p2_line, p2 = rows["P2"]
    p2 = p2.reshape(3, 4)
    fx, fy, cx, cy = p2[0, 0], p2[1, 1], p2[0, 2], p2[1, 2]
    if fx <= 0 or fy <= 0:
        raise ParseError(f"P2 focal lengths must be positive, got {fx}, {fy}", path=path, line=p2_line)

    tr_line, tr = rows["Tr_velo_to_cam"]
    tr = tr.reshape(3, 4)
    rotation = tr[:, :3]
    translation = tr[:, 3].copy()

    rect = None
    if "R0_rect" in rows:
        rect_line, rect_vals = rows["R0_rect"]
        rect = rect_vals.reshape(3, 3)

    # Fold P2's fourth column b into the translation: the file projects with
    # K (R0 (R p + t) + K^-1 b), and the profile with K R0 (R p + t'); the two
    # agree for t' = t + R0^T K^-1 b.
    b = p2[:, 3]
    cam_offset = np.array([(b[0] - cx * b[2]) / fx, (b[1] - cy * b[2]) / fy, b[2]])
    if rect is not None:
        translation = translation + rect.T @ cam_offset
    else:
        translation = translation + cam_offset

    if "image_size" in rows:
        size_line, size_vals = rows["image_size"]
        h, w = size_vals
        if h != int(h) or w != int(w) or h <= 0 or w <= 0:
            raise ParseError(
                f"image_size must be positive integers, got {h} {w}", path=path, line=size_line
            )
        image_size = (int(h), int(w))
    else:
        image_size = DEFAULT_IMAGE_SIZE

    try:
        return CalibrationProfile(
            fx=float(fx),
            fy=float(fy),
            cx=float(cx),
            cy=float(cy),
            rotation=rotation,
            translation=translation,
            image_size=image_size,
            rectification=rect,
        )
    except ConfigError as exc:
        bad_line = rect_line if (rect is not None and "rectification" in str(exc)) else tr_line
        raise ParseError(str(exc), path=path, line=bad_line) from None


def write_calibration(path, calib: CalibrationProfile):
    """Write a profile back out with a zero P2 offset column, %.17g floats."""

    def row(vals):
        return " ".join(f"{float(v):.17g}" for v in vals)

    p2 = [calib.fx, 0.0, calib.cx, 0.0, 0.0, calib.fy, calib.cy, 0.0, 0.0, 0.0, 1.0, 0.0]
    tr = np.hstack([calib.rotation, calib.translation[:, None]]).reshape(-1)
    lines = [f"P2: {row(p2)}", f"Tr_velo_to_cam: {row(tr)}"]
    if calib.rectification is not None:
        lines.append(f"R0_rect: {row(calib.rectification.reshape(-1))}")
    lines.append(f"image_size: {calib.image_size[0]} {calib.image_size[1]}")
    Path(path).write_text("\n".join(lines) + "\n")
