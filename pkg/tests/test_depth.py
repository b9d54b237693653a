"""Depth filter: block correlation, epipolar search, moment updates,
Gaussian fusion, windowed convergence, densification.

Expected values come from closed forms, independent re-triangulation
oracles, or the synthetic scene's analytic plane; none are read back
from the implementation.
"""

import math

import numpy as np
import pytest

from conftest import make_scene
from dronesight.alignment import SparseDepthMap
from dronesight.depth import (
    DenseDepthMap,
    DepthHypothesis,
    densify,
    epipolar_search,
    fuse,
    measurement_moments,
    ncc_score,
    run_depth_window,
)
from dronesight.errors import (
    DegenerateGeometryError,
    InsufficientSeedsError,
    LowCorrelationError,
    OutOfViewError,
    UndefinedCorrelationError,
)
from dronesight.geometry import (
    CameraIntrinsics,
    IntensityImage,
    Pose,
    warp,
)


class TestNccScore:
    def test_self_correlation(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0.1, 0.9, (4, 4))
        assert ncc_score(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0.05, 0.45, (4, 4))
        assert ncc_score(a, 2.0 * a) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_support_is_zero(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert ncc_score(a, b) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = rng.uniform(0, 1, (3, 3))
            b = rng.uniform(0, 1, (3, 3))
            assert ncc_score(a, b) == ncc_score(b, a)

    def test_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.uniform(0, 1, (4, 4)) + 1e-3
            b = rng.uniform(0, 1, (4, 4)) + 1e-3
            assert -1.0 <= ncc_score(a, b) <= 1.0

    def test_zero_block_undefined(self):
        a = np.zeros((4, 4))
        b = np.ones((4, 4))
        with pytest.raises(UndefinedCorrelationError):
            ncc_score(a, b)
        with pytest.raises(UndefinedCorrelationError):
            ncc_score(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ncc_score(np.ones((4, 4)), np.ones((3, 3)))

    def test_no_offset_invariance_without_centering(self):
        # the plain form is scale invariant only; adding a constant
        # changes the score, the centered variant restores it
        rng = np.random.default_rng(4)
        a = rng.uniform(0.1, 0.4, (4, 4))
        shifted = a + 0.3
        assert ncc_score(a, shifted) != pytest.approx(1.0, abs=1e-6)
        assert ncc_score(a, shifted, centered=True) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_centered_constant_block_undefined(self):
        a = np.full((4, 4), 0.7)
        with pytest.raises(UndefinedCorrelationError):
            ncc_score(a, a, centered=True)


class TestMeasurementMoments:
    def test_matches_one_pixel_retriangulation(self):
        # current camera sees the point on its optical axis, so spinning
        # the matched ray by one pixel is exactly atan(1/f) and the text
        # formula must agree with brute-force ray re-intersection
        f = 700.0
        t = np.array([0.3, 0.0, 0.0])
        p = np.array([0.3, 0.0, 5.0])  # on-axis for the current camera
        d_prev = float(np.linalg.norm(p))
        a_cur = np.array([0.0, 0.0, 1.0])

        mu, sigma = measurement_moments(d_prev, t, f, p, a_cur)

        # oracle: move the match from u=0 to u=1 (away from the epipole,
        # the direction that widens beta) and intersect the rays again
        a_pert = np.array([1.0 / f, 0.0, 1.0])
        d_hat = p / d_prev
        m = np.array([[d_hat[0], -a_pert[0]], [d_hat[2], -a_pert[2]]])
        s, _ = np.linalg.solve(m, np.array([t[0], t[2]]))
        assert mu == pytest.approx(0.5 * (d_prev + s), abs=1e-6)
        assert sigma == pytest.approx(abs(s - d_prev), abs=1e-6)

    def test_perturbation_fixed_point_floors_sigma(self):
        # feed back the perturbed depth as the prior: the same geometry
        # reproduces it, so sigma collapses onto the floor
        t = np.array([0.4, 0.0, 0.1])
        d_ray = np.array([0.2, 0.1, 1.0])
        a_cur = np.array([-0.1, 0.1, 1.0])
        mu1, _ = measurement_moments(1.0, t, 600.0, d_ray, a_cur)
        d_new = 2.0 * mu1 - 1.0
        mu2, sigma2 = measurement_moments(d_new, t, 600.0, d_ray, a_cur)
        assert mu2 == pytest.approx(d_new, rel=1e-15)
        assert sigma2 == 1e-4

    def test_parallel_rays_degenerate(self):
        # alpha = beta = 90 deg leaves no room for the one-pixel spin
        t = np.array([1.0, 0.0, 0.0])
        axis = np.array([0.0, 0.0, 1.0])
        with pytest.raises(DegenerateGeometryError):
            measurement_moments(5.0, t, 700.0, axis, axis)

    def test_sigma_decreases_with_focal_length(self):
        t = np.array([0.3, 0.0, 0.0])
        p = np.array([0.3, 0.0, 5.0])
        d_prev = float(np.linalg.norm(p))
        sigmas = [
            measurement_moments(d_prev, t, f, p, [0.0, 0.0, 1.0])[1]
            for f in np.geomspace(50.0, 5000.0, 12)
        ]
        assert all(b < a for a, b in zip(sigmas, sigmas[1:]))

    def test_zero_baseline(self):
        with pytest.raises(DegenerateGeometryError):
            measurement_moments(
                5.0, np.zeros(3), 700.0, [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]
            )

    def test_rejects_bad_arguments(self):
        t = np.array([0.3, 0.0, 0.0])
        ray = [0.0, 0.0, 1.0]
        with pytest.raises(ValueError):
            measurement_moments(-1.0, t, 700.0, ray, ray)
        with pytest.raises(ValueError):
            measurement_moments(5.0, t, -700.0, ray, ray)
        with pytest.raises(ValueError):
            measurement_moments(5.0, t, 700.0, np.zeros(3), ray)


class TestFuse:
    def test_gaussian_product_hand_case(self):
        out = fuse(DepthHypothesis(4.0, 1.0), 6.0, 1.0)
        assert out.mu == pytest.approx(5.0, abs=1e-12)
        assert out.sigma2 == pytest.approx(0.5, abs=1e-12)

    def test_identical_observation_halves_variance(self):
        out = fuse(DepthHypothesis(3.0, 0.25), 3.0, 0.5)
        assert out.mu == pytest.approx(3.0, abs=1e-12)
        assert out.sigma2 == pytest.approx(0.125, abs=1e-12)

    def test_fifty_observations_reach_analytic_posterior(self):
        # broad prior + 50 equal-variance observations at the truth:
        # the posterior approaches sigma_obs^2 / 50
        hyp = DepthHypothesis(4.0, 1e12)
        s = 0.3
        for _ in range(50):
            hyp = fuse(hyp, 5.0, s)
        assert abs(hyp.sigma2 - s**2 / 50.0) < 1e-9
        assert abs(hyp.mu - 5.0) < 1e-9
        assert hyp.observation_count == 50

    def test_order_invariance(self):
        rng = np.random.default_rng(5)
        obs = [(rng.uniform(3, 7), rng.uniform(0.2, 2.0)) for _ in range(8)]

        def run(seq):
            h = DepthHypothesis(5.0, 4.0)
            for m, s in seq:
                h = fuse(h, m, s)
            return h

        a = run(obs)
        b = run(obs[::-1])
        order = rng.permutation(len(obs))
        c = run([obs[i] for i in order])
        for other in (b, c):
            assert abs(a.mu - other.mu) < 1e-12
            assert abs(a.sigma2 - other.sigma2) < 1e-12

    def test_variance_strictly_decreases(self):
        h = DepthHypothesis(5.0, 2.0)
        for m, s in [(5.5, 1.0), (4.8, 3.0), (5.2, 0.5)]:
            nxt = fuse(h, m, s)
            assert nxt.sigma2 < h.sigma2
            assert nxt.sigma2 < s**2
            h = nxt

    def test_rejects_non_positive_observation(self):
        with pytest.raises(ValueError):
            fuse(DepthHypothesis(5.0, 1.0), 5.0, 0.0)
        with pytest.raises(ValueError):
            fuse(DepthHypothesis(5.0, 1.0), -5.0, 1.0)


class TestHypothesisType:
    def test_invariants(self):
        with pytest.raises(ValueError):
            DepthHypothesis(0.0, 1.0)
        with pytest.raises(ValueError):
            DepthHypothesis(1.0, 0.0)
        with pytest.raises(ValueError):
            DepthHypothesis(1.0, 1.0, observation_count=-1)

    def test_convergence_is_strict(self):
        assert DepthHypothesis(1.0, 0.019**2).converged
        assert not DepthHypothesis(1.0, 0.02**2).converged


class TestDenseMapType:
    def test_rejects_negative_depth(self):
        with pytest.raises(ValueError):
            DenseDepthMap(np.full((4, 4), -1.0), np.ones((4, 4)))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            DenseDepthMap(np.zeros((4, 4)), np.ones((4, 5)))

    def test_known_pixels_need_positive_variance(self):
        depth = np.zeros((4, 4))
        depth[1, 1] = 3.0
        var = np.ones((4, 4))
        var[1, 1] = 0.0
        with pytest.raises(ValueError):
            DenseDepthMap(depth, var)
        var[1, 1] = 0.5
        m = DenseDepthMap(depth, var)
        assert m.known.sum() == 1 and m.width == 4 and m.height == 4


def _plane_depths(truth, locs, frame=0):
    """True z-depth and along-ray depth of ground pixels."""
    K = truth.intrinsics
    plane = truth.plane_in_frame(frame)
    rays = K.ray(locs[:, 0], locs[:, 1])
    rn = np.linalg.norm(rays, axis=1)
    z = plane.h_cam / (rays @ plane.normal)
    return z, z * rn


@pytest.fixture(scope="module")
def ground_pair():
    truth = make_scene(
        width=640, height=480, n_frames=2, fps=2.0,
        velocity=(3.0, 0.0, 0.0), plane_height=5.0, objects=(),
        detail_amplitude=0.12, detail_freq=3.0,
    )
    xi = truth.camera_from_world(1).compose(truth.poses[0])
    return truth, truth.render_frame(0), truth.render_frame(1), xi


class TestEpipolarSearch:
    def test_recovers_depth_within_one_step(self, ground_pair):
        truth, ref, cur, xi = ground_pair
        K = truth.intrinsics
        locs = np.array([[500.0, 450.0]])
        z_true, d_true = _plane_depths(truth, locs)
        hyp = DepthHypothesis(0.9 * d_true[0], (0.1 * d_true[0]) ** 2)
        obs = epipolar_search(hyp, ref.block(locs[0], 2), cur, xi, K)
        # one sampling step of depth at the match: move 0.7 px along
        # the segment and see how far the triangulation travels
        rn = float(np.linalg.norm(K.ray(*locs[0])))
        px_true = warp(locs[0], 1.0 / z_true[0], xi, K)
        px_step = warp(locs[0], 1.0 / (z_true[0] * 1.01), xi, K)
        dir_px = (px_step - px_true) / np.linalg.norm(px_step - px_true)
        from dronesight.geometry import triangulate

        d_moved = triangulate(
            Pose.identity(), xi.inverse(), locs[0], px_true + 0.7 * dir_px, K
        )
        step_depth = abs(d_moved - d_true[0])
        assert abs(obs.depth - d_true[0]) <= step_depth + 1e-9
        assert obs.ncc > 0.85

    def test_match_reprojects_onto_matched_pixel(self, ground_pair):
        truth, ref, cur, xi = ground_pair
        K = truth.intrinsics
        for x in (460.0, 520.0, 580.0):
            loc = np.array([x, 440.0])
            _, d = _plane_depths(truth, loc[None, :])
            hyp = DepthHypothesis(1.05 * d[0], (0.1 * d[0]) ** 2)
            obs = epipolar_search(hyp, ref.block(loc, 2), cur, xi, K)
            rn = float(np.linalg.norm(K.ray(*loc)))
            px = warp(loc, rn / obs.depth, xi, K)
            assert np.linalg.norm(px - obs.pixel) <= 0.7 + 1e-9

    def test_textureless_frame_rejected(self, ground_pair):
        truth, ref, cur, xi = ground_pair
        K = truth.intrinsics
        flat = IntensityImage(np.full((480, 640), 0.5))
        hyp = DepthHypothesis(9.0, 1.0)
        with pytest.raises(LowCorrelationError):
            epipolar_search(
                hyp, ref.block(np.array([500.0, 450.0]), 2), flat, xi, K
            )

    def test_pure_rotation_degenerate(self, ground_pair):
        truth, ref, cur, _ = ground_pair
        K = truth.intrinsics
        c, s = math.cos(0.05), math.sin(0.05)
        rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        hyp = DepthHypothesis(9.0, 1.0)
        with pytest.raises(DegenerateGeometryError):
            epipolar_search(
                hyp,
                ref.block(np.array([500.0, 450.0]), 2),
                cur,
                Pose(rot, np.zeros(3)),
                K,
            )

    def test_segment_outside_image(self, ground_pair):
        truth, ref, cur, xi = ground_pair
        K = truth.intrinsics
        # leftward flow pushes the match of a left-edge pixel out of view
        loc = np.array([8.0, 450.0])
        _, d = _plane_depths(truth, loc[None, :])
        hyp = DepthHypothesis(d[0], (0.05 * d[0]) ** 2)
        with pytest.raises(OutOfViewError):
            epipolar_search(hyp, ref.block(loc, 2), cur, xi, K)


class TestRunDepthWindow:
    def _seeds(self, truth, n_frames=4):
        frames = [truth.render_frame(k) for k in range(n_frames)]
        locs = np.array(
            [(x, y) for y in (140.0, 155.0) for x in (60.0, 120.0, 180.0)]
        )
        z, _ = _plane_depths(truth, locs)
        dmap = SparseDepthMap(
            frames[0], locs, 1.0 / z, np.full(z.shape, 0.01)
        )
        return frames, list(truth.poses[:n_frames]), dmap

    def test_single_frame_invalid(self):
        truth = make_scene(n_frames=2, objects=())
        frames, poses, dmap = self._seeds(truth, n_frames=2)
        with pytest.raises(ValueError):
            run_depth_window(frames[:1], poses[:1], dmap, truth.intrinsics)

    def test_frame_pose_mismatch(self):
        truth = make_scene(n_frames=3, objects=())
        frames, poses, dmap = self._seeds(truth, n_frames=3)
        with pytest.raises(ValueError):
            run_depth_window(frames, poses[:2], dmap, truth.intrinsics)

    def test_wrong_reference_frame(self):
        truth = make_scene(n_frames=3, objects=())
        frames, poses, dmap = self._seeds(truth, n_frames=3)
        small = make_scene(width=120, height=90, n_frames=1, objects=())
        other = SparseDepthMap(
            small.render_frame(0),
            np.array([[40.0, 60.0], [60.0, 60.0], [50.0, 70.0]]),
            np.array([0.1, 0.1, 0.1]),
            np.array([0.01, 0.01, 0.01]),
        )
        with pytest.raises(ValueError):
            run_depth_window(frames, poses, other, truth.intrinsics)

    def test_no_baseline_rejects_everything(self):
        # a static camera (rotation-only motion has the same zero
        # baseline) leaves depth unobservable: every observation is
        # rejected and nothing converges
        truth = make_scene(n_frames=4, velocity=(0.0, 0.0, 0.0), objects=())
        frames, poses, dmap = self._seeds(truth)
        res = run_depth_window(
            frames, poses, dmap, truth.intrinsics, densify_result=False
        )
        assert res.converged.sum() == 0
        assert all(h.observation_count == 0 for h in res.hypotheses)
        assert res.rejections["DegenerateGeometryError"] == len(dmap) * 3

    def test_window_converges_on_plane(self, depth_window_case):
        # full-size convergence case shared with the acceptance run
        res, d_true, _ = depth_window_case
        conv = res.converged
        errs = np.array(
            [abs(h.mu - d) / d for h, d in zip(res.hypotheses, d_true)]
        )
        assert conv.mean() >= 0.9
        assert np.all(errs[conv] < 0.02)


class TestDensify:
    def _intrinsics(self):
        return CameraIntrinsics(f=80.0, cx=40.0, cy=30.0, width=80, height=60)

    def test_constant_region_fixed_point(self):
        # equal-depth seeds around a textureless region: propagation has
        # nothing to prefer, the region fills with the seed depth
        K = self._intrinsics()
        img = IntensityImage(np.full((60, 80), 0.5))
        frames = [img, img, img]
        poses = [
            Pose.identity(),
            Pose(np.eye(3), np.array([0.3, 0.0, 0.0])),
            Pose(np.eye(3), np.array([0.0, 0.3, 0.0])),
        ]
        z = 4.0
        seeds = []
        for px in ([30.0, 20.0], [55.0, 25.0], [40.0, 45.0], [28.0, 38.0]):
            rn = float(np.linalg.norm(K.ray(*px)))
            seeds.append((np.array(px), DepthHypothesis(z * rn, 1e-6)))
        dense = densify(seeds, frames, poses, K)
        known = dense.known
        assert known.sum() > 100
        np.testing.assert_allclose(dense.depth[known], z, atol=1e-9)

    def test_planar_scene_within_one_percent(self):
        # needs real parallax: at 3 m/s and 2 fps each frame adds a
        # 1.5 m baseline, so depth errors of 1% move reprojections by
        # whole pixels and the sweeps can tell candidates apart; the
        # texture band is tuned to ~8 px wavelength at the hull rows
        truth = make_scene(
            width=480,
            height=360,
            n_frames=6,
            fps=2.0,
            velocity=(3.0, 0.0, 0.0),
            objects=(),
            detail_amplitude=0.15,
            detail_freq=1.6,
        )
        K = truth.intrinsics
        frames = [truth.render_frame(k) for k in range(6)]
        poses = list(truth.poses[:6])
        plane = truth.plane_in_frame(0)
        locs = np.array(
            [
                (float(x), float(y))
                for y in range(300, 331, 2)
                for x in (220.0, 235.0, 250.0, 265.0)
            ]
        )
        z, d = _plane_depths(truth, locs)
        seeds = [
            (locs[i], DepthHypothesis(d[i], (1e-3 * d[i]) ** 2))
            for i in range(len(locs))
        ]
        dense = densify(seeds, frames, poses, K)
        ys, xs = np.nonzero(dense.known)
        rays = K.ray(xs.astype(float), ys.astype(float))
        z_true = plane.h_cam / (rays @ plane.normal)
        rel = np.abs(dense.depth[ys, xs] - z_true) / z_true
        assert rel.max() < 0.01
        # interpolation boundedness: never outside the seed depth range
        assert dense.depth[ys, xs].min() >= z.min() - 1e-12
        assert dense.depth[ys, xs].max() <= z.max() + 1e-12

    def test_too_few_seeds(self):
        K = self._intrinsics()
        img = IntensityImage(np.full((60, 80), 0.5))
        seeds = [
            (np.array([20.0, 20.0]), DepthHypothesis(4.0, 1e-6)),
            (np.array([50.0, 30.0]), DepthHypothesis(4.0, 1e-6)),
        ]
        with pytest.raises(InsufficientSeedsError):
            densify(seeds, [img, img], [Pose.identity()] * 2, K)

    def test_collinear_seeds(self):
        K = self._intrinsics()
        img = IntensityImage(np.full((60, 80), 0.5))
        seeds = [
            (np.array([x, 30.0]), DepthHypothesis(4.0, 1e-6))
            for x in (20.0, 40.0, 60.0)
        ]
        with pytest.raises(InsufficientSeedsError):
            densify(seeds, [img, img], [Pose.identity()] * 2, K)
