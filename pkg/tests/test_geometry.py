"""Projection and coordinate-frame math.

The hand cases rely on the documented conventions: ego x forward / y left /
z up, camera z forward, pixels (column, row) with x_im = fx*x/z + cx.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from bevfuse.errors import ConfigError
from bevfuse.geometry import (
    Box2D,
    Box3D,
    CalibrationProfile,
    OrientedBoxBEV,
    Point3D,
    project_box3d_to_image_rect,
    project_points_to_image,
    project_to_image,
    transform_points_to_camera,
    transform_points_to_ego,
    transform_to_camera,
    unproject_pixel,
    unproject_pixels,
    wrap_angle_half_pi,
    wrap_angle_pi,
)

from conftest import FORWARD_CAM_ROT, forward_camera


class TestAngleWrapping:
    def test_wrap_pi_basics(self):
        assert wrap_angle_pi(0.0) == 0.0
        assert wrap_angle_pi(math.pi) == pytest.approx(-math.pi)
        assert wrap_angle_pi(-math.pi) == pytest.approx(-math.pi)
        assert wrap_angle_pi(3 * math.pi / 2) == pytest.approx(-math.pi / 2)

    def test_wrap_pi_is_periodic(self):
        rng = np.random.default_rng(0)
        theta = rng.uniform(-20, 20, 500)
        wrapped = wrap_angle_pi(theta)
        assert np.all(wrapped >= -math.pi)
        assert np.all(wrapped < math.pi)
        np.testing.assert_allclose(np.sin(wrapped), np.sin(theta), atol=1e-12)
        np.testing.assert_allclose(np.cos(wrapped), np.cos(theta), atol=1e-12)

    def test_wrap_half_pi_identifies_opposite_headings(self):
        rng = np.random.default_rng(1)
        theta = rng.uniform(-10, 10, 200)
        a = wrap_angle_half_pi(theta)
        b = wrap_angle_half_pi(theta + math.pi)
        np.testing.assert_allclose(a, b, atol=1e-9)
        assert np.all(a >= -math.pi / 2)
        assert np.all(a < math.pi / 2)


class TestBoxes:
    def test_box3d_rejects_bad_sizes(self):
        with pytest.raises(ConfigError):
            Box3D(0, 0, 0, -1.0, 4.0, 1.5, 0.0)
        with pytest.raises(ConfigError):
            Box3D(0, 0, 0, 2.0, 4.0, float("nan"), 0.0)

    def test_box3d_wraps_yaw(self):
        box = Box3D(0, 0, 0, 2, 4, 1.5, 3 * math.pi)
        assert box.yaw == pytest.approx(-math.pi)

    def test_corners_axis_aligned(self):
        box = Box3D(10.0, -2.0, 1.0, 2.0, 4.0, 1.5, 0.0)
        corners = box.corners()
        assert corners.shape == (8, 3)
        # extent checks; l along x at yaw 0
        np.testing.assert_allclose(corners[:, 0].max(), 12.0)
        np.testing.assert_allclose(corners[:, 0].min(), 8.0)
        np.testing.assert_allclose(corners[:, 1].max(), -1.0)
        np.testing.assert_allclose(corners[:, 1].min(), -3.0)
        np.testing.assert_allclose(corners[:, 2].max(), 1.75)
        np.testing.assert_allclose(corners[:, 2].min(), 0.25)

    def test_corners_rotate_with_yaw(self):
        box = Box3D(0, 0, 0, 2.0, 4.0, 1.0, math.pi / 2)
        corners = box.corners()
        # heading now along +y: length extent on y, width extent on x
        np.testing.assert_allclose(corners[:, 1].max(), 2.0, atol=1e-12)
        np.testing.assert_allclose(corners[:, 0].max(), 1.0, atol=1e-12)

    def test_bev_footprint_matches_top_face(self):
        box = Box3D(3.0, 1.0, 0.5, 1.8, 4.2, 1.5, 0.7)
        top = box.corners()[:4, :2]
        np.testing.assert_allclose(box.bev().corners(), top, atol=1e-12)

    def test_box2d_bounds_roundtrip(self):
        rect = Box2D.from_bounds(10.0, 20.0, 110.0, 60.0)
        assert rect.cx == 60.0 and rect.cy == 40.0
        assert rect.w == 100.0 and rect.h == 40.0
        assert (rect.x_min, rect.y_min, rect.x_max, rect.y_max) == (10.0, 20.0, 110.0, 60.0)

    def test_bev_box_area(self):
        assert OrientedBoxBEV(0, 0, 2.0, 3.0, 0.3).area() == pytest.approx(6.0)


class TestCalibrationProfile:
    def test_rejects_non_orthonormal_rotation(self):
        bad = np.eye(3)
        bad[0, 0] = 2.0
        with pytest.raises(ConfigError):
            CalibrationProfile(100, 100, 0, 0, bad, np.zeros(3), (10, 10))

    def test_rejects_reflection(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ConfigError):
            CalibrationProfile(100, 100, 0, 0, refl, np.zeros(3), (10, 10))

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ConfigError):
            CalibrationProfile(0.0, 100, 0, 0, np.eye(3), np.zeros(3), (10, 10))

    def test_camera_rotation_includes_rectification(self):
        rect = FORWARD_CAM_ROT  # any rotation works for the composition check
        calib = CalibrationProfile(
            100, 100, 0, 0, FORWARD_CAM_ROT, np.zeros(3), (10, 10), rectification=rect
        )
        np.testing.assert_allclose(calib.camera_rotation(), rect @ FORWARD_CAM_ROT)


class TestTransforms:
    def test_forward_camera_hand_case(self):
        calib = forward_camera()
        # 10 m ahead, 2 m left, 1 m up
        p = transform_to_camera(Point3D(10.0, 2.0, 1.0), calib)
        assert (p.x, p.y, p.z) == (-2.0, -1.0, 10.0)

    def test_batch_matches_single(self):
        calib = forward_camera()
        rng = np.random.default_rng(2)
        pts = rng.uniform(-10, 10, (50, 3))
        batch = transform_points_to_camera(pts, calib)
        for i in range(50):
            single = transform_to_camera(Point3D(*pts[i]), calib)
            np.testing.assert_allclose(batch[i], single.as_array(), atol=1e-12)

    def test_ego_camera_inverse(self):
        calib = CalibrationProfile(
            100,
            100,
            5,
            5,
            FORWARD_CAM_ROT,
            np.array([0.1, -0.2, 0.05]),
            (96, 128),
            rectification=np.eye(3),
        )
        rng = np.random.default_rng(3)
        pts = rng.uniform(-20, 20, (200, 3))
        back = transform_points_to_ego(transform_points_to_camera(pts, calib), calib)
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_rectification_applied_after_rigid(self):
        # rectification rotating camera x into y must move the pixel column
        c, s = math.cos(0.1), math.sin(0.1)
        rect = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        plain = forward_camera()
        with_rect = CalibrationProfile(
            100, 100, 63.5, 47.5, FORWARD_CAM_ROT, np.zeros(3), (96, 128), rectification=rect
        )
        p = np.array([[10.0, 0.0, 0.0]])
        expected = rect @ transform_points_to_camera(p, plain)[0]
        np.testing.assert_allclose(transform_points_to_camera(p, with_rect)[0], expected)


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        calib = forward_camera()
        pix = project_to_image(Point3D(0.0, 0.0, 7.0), calib)
        assert pix == (calib.cx, calib.cy)

    def test_known_offsets(self):
        calib = forward_camera(fx=200.0, fy=50.0)
        x_im, y_im = project_to_image(Point3D(1.0, -2.0, 4.0), calib)
        assert x_im == pytest.approx(calib.cx + 200.0 * 1.0 / 4.0)
        assert y_im == pytest.approx(calib.cy + 50.0 * -2.0 / 4.0)

    def test_behind_camera_returns_none(self):
        calib = forward_camera()
        assert project_to_image(Point3D(0.0, 0.0, -1.0), calib) is None
        assert project_to_image(Point3D(0.0, 0.0, 0.0), calib) is None

    def test_vectorized_matches_scalar_and_masks_behind(self):
        calib = forward_camera()
        pts = np.array([[1.0, 2.0, 5.0], [0.5, -1.0, 3.0], [0.0, 0.0, -2.0]])
        pixels, in_front = project_points_to_image(pts, calib)
        assert in_front.tolist() == [True, True, False]
        assert np.all(np.isnan(pixels[2]))
        for i in range(2):
            np.testing.assert_allclose(
                pixels[i], project_to_image(Point3D(*pts[i]), calib), atol=1e-12
            )

    def test_project_unproject_roundtrip(self):
        calib = forward_camera(fx=321.0, fy=299.5)
        rng = np.random.default_rng(4)
        depth = rng.uniform(0.5, 60.0, 300)
        x_im = rng.uniform(-50, 200, 300)
        y_im = rng.uniform(-50, 150, 300)
        cam = unproject_pixels(x_im, y_im, depth, calib)
        pixels, in_front = project_points_to_image(cam, calib)
        assert np.all(in_front)
        np.testing.assert_allclose(pixels[:, 0], x_im, atol=1e-9)
        np.testing.assert_allclose(pixels[:, 1], y_im, atol=1e-9)
        np.testing.assert_allclose(cam[:, 2], depth)

    def test_unproject_rejects_bad_depth(self):
        calib = forward_camera()
        with pytest.raises(ConfigError):
            unproject_pixel(10, 10, 0.0, calib)
        with pytest.raises(ConfigError):
            unproject_pixels([10.0], [10.0], [-1.0], calib)


class TestBoxProjection:
    def test_centered_box_rect(self):
        calib = forward_camera(image_size=(200, 300), fx=100.0, fy=100.0)
        box = Box3D(20.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0)
        rect = project_box3d_to_image_rect(box, calib)
        assert rect is not None
        # nearest face at x=18: widest in pixels; y extent from h=1.5 there
        assert rect.x_max - rect.x_min == pytest.approx(100 * 2.0 / 18.0, rel=1e-9)
        assert rect.y_max - rect.y_min == pytest.approx(100 * 1.5 / 18.0, rel=1e-9)

    def test_box_behind_camera_is_none(self):
        calib = forward_camera()
        box = Box3D(-15.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0)
        assert project_box3d_to_image_rect(box, calib) is None

    def test_rect_clips_to_image(self):
        calib = forward_camera(image_size=(96, 128))
        # wide box close to the camera spills past the left/right edges
        box = Box3D(3.0, 0.0, 0.0, 30.0, 1.0, 1.0, math.pi / 2)
        rect = project_box3d_to_image_rect(box, calib)
        assert rect is not None
        assert rect.x_min >= 0.0
        assert rect.x_max <= 127.0
        assert rect.y_min >= 0.0
        assert rect.y_max <= 95.0
