"""Camera model, pose algebra, projection, warping, epipolar utilities.

Derived expectations are either hand-evaluated closed forms or computed
in-test by an independent route (finite differences, project-transform-
backproject chains) rather than asserted from thin air.
"""

import math

import numpy as np
import pytest

from dronesight.errors import BehindCameraError, DegenerateGeometryError
from dronesight.geometry import (
    CameraIntrinsics,
    IntensityImage,
    PixelBlock,
    Pose,
    approximate_intrinsics,
    backproject,
    epipolar_line,
    huber_norm,
    project,
    triangulate,
    warp,
)


def _rot(axis, deg):
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    a = math.radians(deg)
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + math.sin(a) * k + (1 - math.cos(a)) * (k @ k)


class TestIntrinsics:
    def test_default_mode_90deg(self):
        K = approximate_intrinsics(1920, 1080, 90.0)
        # (w/2)/tan(45 deg) = w/2
        assert K.f == pytest.approx(960.0, abs=1e-12)
        assert K.cx == 960.0 and K.cy == 540.0

    def test_literal_mode_matches_direct_evaluation(self):
        K = approximate_intrinsics(1920, 1080, 90.0, literal=True)
        expected = (1920 / 2.0) * math.atan((90.0 / 180.0) * (math.pi / 2.0))
        assert K.f == pytest.approx(expected, rel=1e-12)
        assert K.f == pytest.approx(639.14, abs=0.01)

    def test_unit_case(self):
        K = approximate_intrinsics(2, 2, 90.0)
        assert K.f == pytest.approx(1.0)
        assert K.cx == 1.0 and K.cy == 1.0

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            approximate_intrinsics(0, 10, 90.0)
        with pytest.raises(ValueError):
            approximate_intrinsics(10, 10, 0.0)
        with pytest.raises(ValueError):
            approximate_intrinsics(10, 10, 180.0)

    def test_inverse_matrix(self):
        K = CameraIntrinsics(f=317.0, cx=120.5, cy=89.5, width=240, height=180)
        np.testing.assert_allclose(
            K.matrix() @ K.inverse_matrix(), np.eye(3), atol=1e-12
        )


class TestPose:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = Pose.exp(rng.normal(scale=0.5, size=6))
            q = p.compose(p.inverse())
            assert np.allclose(q.rotation, np.eye(3), atol=1e-12)
            assert np.allclose(q.translation, 0.0, atol=1e-12)

    def test_compose_associative(self):
        rng = np.random.default_rng(1)
        a, b, c = (Pose.exp(rng.normal(scale=0.4, size=6)) for _ in range(3))
        lhs = a.compose(b).compose(c)
        rhs = a.compose(b.compose(c))
        assert np.allclose(lhs.rotation, rhs.rotation, atol=1e-12)
        assert np.allclose(lhs.translation, rhs.translation, atol=1e-12)

    def test_exp_small_angle(self):
        xi = np.array([1e-12, 0, 0, 0, 1e-13, 0])
        p = Pose.exp(xi)
        assert np.allclose(p.rotation, np.eye(3), atol=1e-12)

    def test_exp_pure_translation(self):
        p = Pose.exp([1.0, -2.0, 3.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(p.translation, [1.0, -2.0, 3.0], atol=1e-15)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.01, np.zeros(3))


class TestProject:
    def test_optical_axis(self):
        K = CameraIntrinsics(1.0, 0.0, 0.0, 4, 4)
        assert np.allclose(project(K, Pose.identity(), [0, 0, 1]), [0, 0])

    def test_hand_pinhole(self):
        K = CameraIntrinsics(100.0, 50.0, 50.0, 200, 200)
        assert np.allclose(project(K, Pose.identity(), [1, 0, 2]), [100, 50])

    def test_behind_camera(self):
        K = CameraIntrinsics(100.0, 50.0, 50.0, 200, 200)
        with pytest.raises(BehindCameraError):
            project(K, Pose.identity(), [0, 0, -1])

    def test_backproject_round_trip(self):
        K = CameraIntrinsics(320.0, 160.0, 120.0, 320, 240)
        rng = np.random.default_rng(2)
        for _ in range(50):
            px = rng.uniform([0, 0], [319, 239])
            z = rng.uniform(0.5, 40.0)
            p = backproject(K, px, z)
            assert np.allclose(project(K, Pose.identity(), p), px, atol=1e-9)


class TestHuber:
    def test_zero(self):
        assert huber_norm(0.0, 1.0) == 0.0

    def test_boundary_quadratic(self):
        assert huber_norm(1.0, 1.0) == pytest.approx(0.5, abs=1e-15)

    def test_linear_branch(self):
        assert huber_norm(3.0, 1.0) == pytest.approx(2.5, abs=1e-15)

    def test_even_and_monotone(self):
        rs = np.linspace(0, 5, 200)
        vals = [huber_norm(r, 0.7) for r in rs]
        assert all(huber_norm(-r, 0.7) == huber_norm(r, 0.7) for r in rs)
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_derivative_matches_finite_differences(self):
        # away from zero; derivative of the norm via central differences
        delta = 0.3
        for r in [0.05, 0.2, 0.29, 0.31, 0.5, 2.0, -1.3]:
            h = 1e-6
            num = (huber_norm(r + h, delta) - huber_norm(r - h, delta)) / (2 * h)
            ana = r if abs(r) <= delta else delta * math.copysign(1.0, r)
            assert num == pytest.approx(ana, abs=1e-6)

    def test_continuity_at_delta(self):
        delta = 0.1
        lo = huber_norm(delta - 1e-12, delta)
        hi = huber_norm(delta + 1e-12, delta)
        assert abs(hi - lo) < 1e-11


class TestWarp:
    def test_identity(self):
        K = CameraIntrinsics(100.0, 50.0, 40.0, 100, 80)
        out = warp([10.0, 20.0], 0.5, Pose.identity(), K)
        assert np.allclose(out, [10.0, 20.0], atol=1e-12)

    def test_matches_project_transform_backproject(self):
        K = CameraIntrinsics(240.0, 120.0, 90.0, 240, 180)
        xi = Pose(_rot([0, 1, 0], 3.0), np.array([0.2, -0.1, 0.05]))
        rng = np.random.default_rng(3)
        for _ in range(30):
            px = rng.uniform([10, 10], [230, 170])
            z = rng.uniform(1.0, 20.0)
            expected = project(K, xi, backproject(K, px, z))
            got = warp(px, 1.0 / z, xi, K)
            assert np.allclose(got, expected, atol=1e-9)

    def test_forward_motion_moves_pixels_outward(self):
        K = CameraIntrinsics(100.0, 60.0, 60.0, 120, 120)
        xi = Pose(np.eye(3), np.array([0.0, 0.0, -2.0]))  # scene depth halves
        for px in ([80.0, 60.0], [60.0, 90.0], [75.0, 75.0]):
            out = warp(np.array(px), 1.0 / 4.0, xi, K)
            r0 = np.linalg.norm(np.array(px) - [60, 60])
            r1 = np.linalg.norm(out - [60, 60])
            assert r1 > r0

    def test_behind_camera(self):
        K = CameraIntrinsics(100.0, 60.0, 60.0, 120, 120)
        xi = Pose(np.eye(3), np.array([0.0, 0.0, -10.0]))
        with pytest.raises(BehindCameraError):
            warp([60.0, 60.0], 1.0 / 4.0, xi, K)


class TestTriangulate:
    def test_lateral_baseline_exact(self):
        # project() consumes world->camera; triangulate() camera->world
        K = CameraIntrinsics(100.0, 60.0, 60.0, 120, 120)
        p = np.array([0.0, 0.0, 5.0])
        cam_from_world = Pose(np.eye(3), np.array([-1.0, 0.0, 0.0]))
        x_ref = project(K, Pose.identity(), p)
        x_cur = project(K, cam_from_world, p)
        d = triangulate(Pose.identity(), cam_from_world.inverse(),
                        x_ref, x_cur, K)
        assert d == pytest.approx(5.0, abs=1e-9)

    def test_zero_baseline(self):
        K = CameraIntrinsics(100.0, 60.0, 60.0, 120, 120)
        with pytest.raises(DegenerateGeometryError):
            triangulate(Pose.identity(), Pose.identity(),
                        [50.0, 50.0], [55.0, 50.0], K)

    def test_recovers_random_synthetic_depths(self):
        K = CameraIntrinsics(200.0, 120.0, 90.0, 240, 180)
        rng = np.random.default_rng(4)
        pose_ref = Pose.identity()
        for _ in range(40):
            p = np.array([rng.uniform(-3, 3), rng.uniform(-2, 2),
                          rng.uniform(3, 25)])
            t = rng.uniform(-0.8, 0.8, 3)
            if np.linalg.norm(t) < 0.3:
                t = np.array([0.5, 0.0, 0.0])
            cam_from_world = Pose(_rot(rng.normal(size=3),
                                       rng.uniform(-4, 4)), t)
            try:
                x_ref = project(K, pose_ref, p)
                x_cur = project(K, cam_from_world, p)
                d = triangulate(pose_ref, cam_from_world.inverse(),
                                x_ref, x_cur, K)
            except (BehindCameraError, DegenerateGeometryError):
                continue
            # reference-ray norm of the true point
            assert d == pytest.approx(np.linalg.norm(p), rel=1e-6)


class TestEpipolarLine:
    def test_lateral_motion_horizontal_segment(self):
        K = CameraIntrinsics(100.0, 60.0, 60.0, 120, 120)
        xi = Pose(np.eye(3), np.array([-0.5, 0.0, 0.0]))
        seg = epipolar_line(K, xi, [60.0, 60.0], 2.0, 20.0)
        assert seg.start[1] == pytest.approx(60.0, abs=1e-9)
        assert seg.end[1] == pytest.approx(60.0, abs=1e-9)

    def test_warp_consistency_over_depths(self):
        K = CameraIntrinsics(150.0, 80.0, 60.0, 160, 120)
        xi = Pose(_rot([0, 0, 1], 2.0), np.array([0.3, -0.2, 0.1]))
        x_ref = np.array([95.0, 40.0])
        d_min, d_max = 2.0, 30.0
        seg = epipolar_line(K, xi, x_ref, d_min, d_max)
        direction = seg.end - seg.start
        length2 = float(direction @ direction)
        for d in np.linspace(d_min, d_max, 10):
            px = warp(x_ref, 1.0 / d, xi, K)
            # distance from px to the segment's supporting line
            s = float((px - seg.start) @ direction) / length2
            closest = seg.start + np.clip(s, 0.0, 1.0) * direction
            assert np.linalg.norm(px - closest) < 1e-6

    def test_zero_baseline(self):
        K = CameraIntrinsics(100.0, 60.0, 60.0, 120, 120)
        xi = Pose(_rot([0, 1, 0], 5.0), np.zeros(3))
        with pytest.raises(DegenerateGeometryError):
            epipolar_line(K, xi, [60.0, 60.0], 2.0, 20.0)


class TestImage:
    def test_bilinear_matches_manual(self):
        img = IntensityImage(np.array([[0.0, 1.0], [0.2, 0.8]]))
        # center of the four pixels: mean
        assert img.sample(0.5, 0.5) == pytest.approx(0.5, abs=1e-12)
        assert img.sample(0.0, 0.0) == pytest.approx(0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        img = IntensityImage(rng.uniform(0.1, 0.9, (24, 24)))
        for _ in range(25):
            x, y = rng.uniform(2, 21, 2)
            _, gx, gy = img.sample_with_gradient(x, y)
            h = 1e-6
            nx = (img.sample(x + h, y) - img.sample(x - h, y)) / (2 * h)
            ny = (img.sample(x, y + h) - img.sample(x, y - h)) / (2 * h)
            assert gx == pytest.approx(nx, abs=1e-5)
            assert gy == pytest.approx(ny, abs=1e-5)

    def test_block_shape(self):
        img = IntensityImage(np.linspace(0, 1, 100).reshape(10, 10))
        blk = img.block((4.5, 4.5), 2)
        assert blk.intensities.shape == (5, 5)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            IntensityImage(np.array([[0.0, 1.5]]))

    def test_block_validates_shape(self):
        with pytest.raises(ValueError):
            PixelBlock(np.zeros(2), 1, np.zeros((2, 2)))
