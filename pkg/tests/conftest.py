"""Shared fixtures: small synthetic scenes reused across test modules."""

import numpy as np
import pytest

from dronesight.synth import ObjectSpec, SceneSpec, build_scene


def make_scene(**overrides):
    """A compact rendered scene; overrides patch individual spec fields."""
    base = dict(
        width=240,
        height=180,
        hfov_deg=90.0,
        n_frames=12,
        fps=30.0,
        velocity=(1.5, 0.0, 0.0),
        plane_height=10.0,
        pitch_deg=0.0,
        texture_seed=7,
        objects=(
            ObjectSpec(u0=-3.0, v0=14.0),
            ObjectSpec(u0=2.5, v0=18.0, du=0.01, dv=-0.01),
        ),
        seed=3,
    )
    base.update(overrides)
    return build_scene(SceneSpec(**base))


@pytest.fixture(scope="session")
def lateral_scene():
    """Camera translating laterally over a textured level plane."""
    return make_scene()


@pytest.fixture(scope="session")
def pitched_scene():
    """15-degree pitched plane seen from 3 m up, objects near to far.

    At this height the visible ground band covers object distances from
    ~9 m out past 60 m, populating every localization bucket.
    """
    return make_scene(
        n_frames=30,
        velocity=(0.0, 0.0, 0.0),
        plane_height=3.0,
        pitch_deg=15.0,
        objects=(
            ObjectSpec(u0=-1.0, v0=9.0),
            ObjectSpec(u0=2.0, v0=14.0),
            ObjectSpec(u0=-3.0, v0=20.0),
            ObjectSpec(u0=1.5, v0=35.0, width_m=1.2),
            ObjectSpec(u0=-2.0, v0=60.0, width_m=1.6, height_m=2.5),
        ),
    )


@pytest.fixture(scope="session")
def depth_window_case():
    """A 30-frame keyframe-cadence depth window over textured ground.

    Frame spacing matters more than frame count here: the filter fuses
    its first accepted observation at the first frame pair, so that pair
    already needs a baseline large enough to resolve depth to ~1%.  At
    3 m/s and 2 fps each step adds a 1.5 m baseline, and from 3.5 m up
    with f = 480 px the one-pixel depth increment stays below the 2%
    convergence band from the start.  Video-rate spacing over the same
    path locks the estimate onto the first coarse observation instead.

    Returns (window result, per-seed true along-ray depth, seed pixels).
    """
    from dronesight.alignment import SparseDepthMap
    from dronesight.depth import run_depth_window

    truth = make_scene(
        width=960,
        height=720,
        n_frames=30,
        fps=2.0,
        velocity=(3.0, 0.0, 0.0),
        plane_height=3.5,
        objects=(),
        detail_amplitude=0.12,
        detail_freq=5.0,
    )
    k_cam = truth.intrinsics
    frames = [truth.render_frame(k) for k in range(30)]
    poses = list(truth.poses[:30])
    plane = truth.plane_in_frame(0)

    xs = np.arange(540, 941, 25)
    ys = np.arange(650, 706, 18)
    locs = np.array([(x, y) for y in ys for x in xs], dtype=float)
    rays = np.array([k_cam.ray(x, y) for x, y in locs])
    z_true = plane.h_cam / (rays @ plane.normal)
    d_true = z_true * np.linalg.norm(rays, axis=1)

    # prior depth 2% long with a loose 10% standard deviation, the
    # shape of a pose-only bootstrap handover
    z_seed = z_true * 1.02
    inv = 1.0 / z_seed
    seeds = SparseDepthMap(
        frames[0],
        locs,
        inv,
        (0.10 / z_seed) ** 2,
        prior_range=(float(inv.min()) * 0.5, float(inv.max()) * 2.0),
    )
    result = run_depth_window(frames, poses, seeds, k_cam,
                              densify_result=False)
    return result, d_true, locs


def boxes_close(a, b, atol=1e-9):
    return np.allclose(np.asarray(a, float), np.asarray(b, float), atol=atol)
