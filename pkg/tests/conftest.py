"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from bevfuse.geometry import CalibrationProfile

# Camera looking along ego +x: camera x = -ego y (right), camera y = -ego z
# (down), camera z = ego x (forward).
FORWARD_CAM_ROT = np.array(
    [
        [0.0, -1.0, 0.0],
        [0.0, 0.0, -1.0],
        [1.0, 0.0, 0.0],
    ]
)


def forward_camera(image_size=(96, 128), fx=100.0, fy=100.0, cx=None, cy=None):
    h, w = image_size
    if cx is None:
        cx = (w - 1) / 2.0
    if cy is None:
        cy = (h - 1) / 2.0
    return CalibrationProfile(
        fx, fy, cx, cy, FORWARD_CAM_ROT, np.zeros(3), image_size
    )
