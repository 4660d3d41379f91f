"""Raw-float tensor files with JSON sidecars, shared by every grid artifact.

A tensor lives in two (optionally three) files with a common stem:

    <stem>.bin    raw little-endian floats, C order
    <stem>.json   sidecar: {"shape", "dtype", "axis_order", ...extras}
    <stem>.mask   optional packed validity bitmask (numpy packbits, big bit
                  order, flattened C order, zero-padded to a whole byte)

``dtype`` is "float32le" or "float64le".  Sidecar JSON is written with
sorted keys so identical tensors produce byte-identical files.  Readers
raise :class:`ParseError` with position information on any malformed input.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError

__all__ = [
    "write_tensor",
    "read_tensor",
    "write_mask",
    "read_mask",
]

_DTYPES = {"float32le": "<f4", "float64le": "<f8"}
_DTYPE_NAMES = {np.dtype(np.float32): "float32le", np.dtype(np.float64): "float64le"}


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".bin", ".json", ".mask"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".bin"), stem.with_suffix(".json"), stem.with_suffix(".mask")


def write_tensor(stem, values, axis_order, extra=None):
    """Write ``values`` (float32 or float64 ndarray) and its sidecar.

    ``axis_order`` is a list of axis names, one per dimension, recorded for
    the reader to validate against.  Returns the data file path.
    """
    values = np.asarray(values)
    if values.dtype not in _DTYPE_NAMES:
        raise ValueError(f"unsupported dtype {values.dtype}; use float32 or float64")
    if len(axis_order) != values.ndim:
        raise ValueError(f"axis_order has {len(axis_order)} names for {values.ndim} axes")
    data_path, sidecar_path, _ = _paths(stem)
    meta = {
        "shape": list(values.shape),
        "dtype": _DTYPE_NAMES[values.dtype],
        "axis_order": list(axis_order),
    }
    if extra:
        meta.update(extra)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    data_path.write_bytes(np.ascontiguousarray(values, dtype=_DTYPES[meta["dtype"]]).tobytes())
    sidecar_path.write_text(json.dumps(meta, sort_keys=True) + "\n")
    return data_path


def read_tensor(stem, expect_axis_order=None, require_finite=True):
    """Read a tensor written by :func:`write_tensor`.

    Returns ``(values, meta)``.  ``expect_axis_order`` (when given) must
    match the sidecar.  Malformed sidecars, size mismatches and (optionally)
    non-finite payloads raise :class:`ParseError`.
    """
    data_path, sidecar_path, _ = _paths(stem)
    try:
        sidecar_text = sidecar_path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read sidecar: {exc}", path=str(sidecar_path)) from exc
    except UnicodeDecodeError as exc:
        raise ParseError(
            f"sidecar is not UTF-8 text ({exc.reason})",
            path=str(sidecar_path),
            offset=exc.start,
        ) from None
    try:
        meta = json.loads(sidecar_text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid sidecar JSON: {exc.msg}", path=str(sidecar_path), line=exc.lineno) from exc
    if not isinstance(meta, dict):
        raise ParseError("sidecar must be a JSON object", path=str(sidecar_path), line=1)

    for key in ("shape", "dtype", "axis_order"):
        if key not in meta:
            raise ParseError(f"sidecar missing key '{key}'", path=str(sidecar_path), line=1)
    shape = meta["shape"]
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(n, int) and n > 0 for n in shape)
    ):
        raise ParseError(f"invalid shape {shape!r}", path=str(sidecar_path), line=1)
    if not isinstance(meta["dtype"], str) or meta["dtype"] not in _DTYPES:
        raise ParseError(f"unknown dtype {meta['dtype']!r}", path=str(sidecar_path), line=1)
    if not isinstance(meta["axis_order"], (str, list)):
        raise ParseError(
            f"invalid axis_order {meta['axis_order']!r}", path=str(sidecar_path), line=1
        )
    if expect_axis_order is not None and list(meta["axis_order"]) != list(expect_axis_order):
        raise ParseError(
            f"axis_order {meta['axis_order']!r} does not match expected {list(expect_axis_order)!r}",
            path=str(sidecar_path),
            line=1,
        )

    dtype = np.dtype(_DTYPES[meta["dtype"]])
    expected = int(np.prod(shape)) * dtype.itemsize
    try:
        raw = data_path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read data: {exc}", path=str(data_path)) from exc
    if len(raw) != expected:
        raise ParseError(
            f"data size {len(raw)} bytes, expected {expected}",
            path=str(data_path),
            offset=min(len(raw), expected),
        )
    values = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if require_finite and not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values.reshape(-1)))[0])
        raise ParseError(
            f"non-finite value at flat index {bad}",
            path=str(data_path),
            offset=bad * dtype.itemsize,
        )
    return values, meta


def write_mask(stem, mask):
    """Write a boolean array as a packed bitmask next to the tensor files."""
    mask = np.asarray(mask, dtype=bool)
    _, _, mask_path = _paths(stem)
    mask_path.parent.mkdir(parents=True, exist_ok=True)
    mask_path.write_bytes(np.packbits(mask.reshape(-1)).tobytes())
    return mask_path


def read_mask(stem, shape):
    """Read a packed bitmask back into a boolean array of ``shape``."""
    _, _, mask_path = _paths(stem)
    try:
        raw = mask_path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read mask: {exc}", path=str(mask_path)) from exc
    n = int(np.prod(shape))
    expected = (n + 7) // 8
    if len(raw) != expected:
        raise ParseError(
            f"mask size {len(raw)} bytes, expected {expected}",
            path=str(mask_path),
            offset=min(len(raw), expected),
        )
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n)
    return bits.astype(bool).reshape(shape)
