"""Bilinear interpolation primitives shared by fusion and ROI extraction.

All samplers clamp to the array edge (border pixels extend outward), and the
gradient helpers return exactly the scatter pattern of the forward gather so
vector-Jacobian products are cheap.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "bilinear_weights",
    "bilinear_gather",
    "bilinear_scatter",
    "resize_bilinear",
]


def bilinear_weights(rows, cols, shape):
    """Clamped bilinear corner indices and weights for continuous positions.

    rows/cols are float arrays of sample positions in cell units; ``shape``
    is the (n_rows, n_cols) of the sampled grid.  Returns
    ``(r0, r1, c0, c1, w00, w01, w10, w11)`` where w_ab weights corner
    (r_a, c_b).
    """
    n_rows, n_cols = shape
    r = np.clip(np.asarray(rows, dtype=np.float64), 0.0, n_rows - 1.0)
    c = np.clip(np.asarray(cols, dtype=np.float64), 0.0, n_cols - 1.0)
    r0 = np.minimum(np.floor(r).astype(np.int64), n_rows - 1)
    c0 = np.minimum(np.floor(c).astype(np.int64), n_cols - 1)
    r1 = np.minimum(r0 + 1, n_rows - 1)
    c1 = np.minimum(c0 + 1, n_cols - 1)
    fr = r - r0
    fc = c - c0
    w00 = (1.0 - fr) * (1.0 - fc)
    w01 = (1.0 - fr) * fc
    w10 = fr * (1.0 - fc)
    w11 = fr * fc
    return r0, r1, c0, c1, w00, w01, w10, w11


def bilinear_gather(values, rows, cols):
    """Sample ``values`` (C, R, Cols) at continuous positions -> (C, M)."""
    r0, r1, c0, c1, w00, w01, w10, w11 = bilinear_weights(rows, cols, values.shape[-2:])
    v = values.astype(np.float64, copy=False)
    return (
        v[..., r0, c0] * w00
        + v[..., r0, c1] * w01
        + v[..., r1, c0] * w10
        + v[..., r1, c1] * w11
    )


def bilinear_scatter(upstream, rows, cols, shape):
    """Adjoint of :func:`bilinear_gather`.

    upstream: (C, M) cotangents of the samples; returns (C,) + shape array
    of cotangents of the sampled grid.
    """
    r0, r1, c0, c1, w00, w01, w10, w11 = bilinear_weights(rows, cols, shape)
    upstream = np.asarray(upstream, dtype=np.float64)
    out = np.zeros(upstream.shape[:-1] + tuple(shape))
    np.add.at(out, (..., r0, c0), upstream * w00)
    np.add.at(out, (..., r0, c1), upstream * w01)
    np.add.at(out, (..., r1, c0), upstream * w10)
    np.add.at(out, (..., r1, c1), upstream * w11)
    return out


def resize_bilinear(values, out_shape):
    """Corner-aligned bilinear resize of (C, R, Cols) to (C,) + out_shape.

    Output cell (i, j) samples the input at
    ``(i * (R-1)/(R_out-1), j * (Cols-1)/(C_out-1))`` (degenerate axes of
    length 1 sample coordinate 0), so grid corners map onto grid corners and
    maps that are affine in cell index stay exactly affine.
    """
    in_rows, in_cols = values.shape[-2:]
    out_rows, out_cols = out_shape
    ri = np.arange(out_rows, dtype=np.float64)
    ci = np.arange(out_cols, dtype=np.float64)
    r = ri * ((in_rows - 1) / (out_rows - 1)) if out_rows > 1 else np.zeros(out_rows)
    c = ci * ((in_cols - 1) / (out_cols - 1)) if out_cols > 1 else np.zeros(out_cols)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    flat = bilinear_gather(values, rr.reshape(-1), cc.reshape(-1))
    return flat.reshape(values.shape[:-2] + (out_rows, out_cols))
