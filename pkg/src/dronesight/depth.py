"""Bayesian depth filtering along epipolar lines, plus densification.

Each tracked pixel of a reference frame carries a Gaussian depth
hypothesis N(mu, sigma^2) over the Euclidean depth along its ray.  For
every new frame the correspondence is searched on the epipolar segment
by normalised cross-correlation of pixel blocks; the matched geometry
is converted to measurement moments by perturbing the observation by
one pixel (the angle arctan(1/f)) and re-intersecting rays with the law
of sines, and the moments are fused into the hypothesis by a Gaussian
product.  Converged hypotheses seed a propagation-based densification
of the depth raster over their convex hull.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError
from sklearn.base import BaseEstimator

from .errors import (
    DegenerateGeometryError,
    InsufficientSeedsError,
    LowCorrelationError,
    OutOfViewError,
    UndefinedCorrelationError,
)
from .geometry import CameraIntrinsics, IntensityImage, PixelBlock, Pose
from .validation import as_float_array, check_positive

_SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class DepthHypothesis:
    """Gaussian belief over depth (metres along the pixel ray)."""

    mu: float
    sigma2: float
    observation_count: int = 0

    def __post_init__(self):
        check_positive(self.mu, "mu")
        check_positive(self.sigma2, "sigma2")
        if self.observation_count < 0:
            raise ValueError("observation_count must be >= 0")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def converged(self) -> bool:
        return self.sigma / self.mu < 0.02


@dataclass(frozen=True, eq=False)
class DepthObservation:
    """One accepted epipolar match."""

    depth: float
    frame: int
    pixel: np.ndarray
    ncc: float


@dataclass(eq=False)
class DenseDepthMap:
    """Per-pixel z-depth raster; 0 marks unknown pixels."""

    depth: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.depth = as_float_array(self.depth, "depth", ndim=2)
        self.variance = as_float_array(self.variance, "variance", ndim=2)
        if self.depth.shape != self.variance.shape:
            raise ValueError("depth and variance must have the same shape")
        if np.any(self.depth < 0):
            raise ValueError("depths must be >= 0 (0 = unknown)")
        known = self.depth > 0
        if np.any(self.variance[known] <= 0):
            raise ValueError("known pixels need positive variance")

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def known(self) -> np.ndarray:
        return self.depth > 0

    @classmethod
    def empty(cls, width: int, height: int) -> "DenseDepthMap":
        return cls(np.zeros((height, width)), np.full((height, width), 1.0))


def _block_array(block) -> np.ndarray:
    if isinstance(block, PixelBlock):
        return block.intensities
    return np.asarray(block, dtype=np.float64)


def ncc_score(a, b, centered: bool = False) -> float:
    """Correlation S = sum(ab) / sqrt(sum(a^2) sum(b^2)) of two blocks.

    The default form subtracts no means, so it is invariant to positive
    scaling but not to offsets; `centered=True` subtracts block means
    first (classic NCC), which adds brightness-offset invariance.  An
    all-zero block (after centering, a constant block) has no defined
    score and raises UndefinedCorrelationError.
    """
    av = _block_array(a).reshape(-1)
    bv = _block_array(b).reshape(-1)
    if av.shape != bv.shape:
        raise ValueError("blocks must have the same shape")
    if centered:
        av = av - av.mean()
        bv = bv - bv.mean()
    na = float(np.dot(av, av))
    nb = float(np.dot(bv, bv))
    if na == 0.0 or nb == 0.0:
        raise UndefinedCorrelationError("correlation of a zero block is undefined")
    return float(np.dot(av, bv) / math.sqrt(na * nb))


def _ncc_many(ref: np.ndarray, cands: np.ndarray) -> np.ndarray:
    """Vectorised scores of one reference block against (S, B) candidates.

    Zero-energy candidates score -inf instead of raising, so searches
    can skip them while keeping a total ordering.
    """
    num = cands @ ref
    na = float(np.dot(ref, ref))
    nb = (cands * cands).sum(axis=1)
    ok = (na > 0.0) & (nb > 0.0)
    out = np.full(cands.shape[0], -np.inf)
    out[ok] = num[ok] / np.sqrt(na * nb[ok])
    return out


def epipolar_search(
    hyp: DepthHypothesis,
    ref_block: PixelBlock,
    cur_frame: IntensityImage,
    xi: Pose,
    K: CameraIntrinsics,
    frame_index: int = -1,
    step_px: float = 0.7,
    accept_threshold: float = 0.85,
    interval_sigmas: float = 2.0,
) -> DepthObservation:
    """Find the best correspondence on the epipolar segment.

    The hypothesis interval [mu - 2 sigma, mu + 2 sigma] (clamped
    positive) is projected into the current frame and sampled at
    `step_px` pixel steps; each sample is scored by `ncc_score` of its
    block against `ref_block` and the depth of the best sample is
    recovered by triangulation.  Ties keep the lowest sample index so
    results do not depend on evaluation order.

    Raises DegenerateGeometryError for a zero baseline, OutOfViewError
    when no sample keeps its block inside the frame, and
    LowCorrelationError when the best score is below the threshold or
    when the score profile is flat (a textureless frame scores every
    candidate identically, so there is no peak to trust).
    """
    if np.linalg.norm(xi.translation) < 1e-12:
        raise DegenerateGeometryError("zero baseline: depth is unobservable")
    half = ref_block.half_size
    x_ref = np.array(ref_block.center, dtype=np.float64)
    ray = K.ray(x_ref[0], x_ref[1])
    ray_norm = float(np.linalg.norm(ray))

    d_lo = max(hyp.mu - interval_sigmas * hyp.sigma, hyp.mu * 1e-3)
    d_hi = hyp.mu + interval_sigmas * hyp.sigma
    # hypothesis depths are along-ray; warping wants z-depth
    z_lo, z_hi = d_lo / ray_norm, d_hi / ray_norm

    n_samples = 64
    zs = np.linspace(z_lo, z_hi, n_samples)
    p = ray[None, :] * zs[:, None]
    q = p @ xi.rotation.T + xi.translation
    front = q[:, 2] > 1e-9
    if not np.any(front):
        raise OutOfViewError("entire depth interval projects behind the camera")
    q = q[front]
    px = K.f * q[:, 0] / q[:, 2] + K.cx
    py = K.f * q[:, 1] / q[:, 2] + K.cy
    seg_len = float(np.hypot(px[-1] - px[0], py[-1] - py[0]))
    n = max(2, int(math.ceil(seg_len / step_px)) + 1)
    t = np.linspace(0.0, 1.0, n)
    sx = px[0] + t * (px[-1] - px[0])
    sy = py[0] + t * (py[-1] - py[0])

    inside = cur_frame.contains(sx, sy, margin=half + 1.0)
    if not np.any(inside):
        raise OutOfViewError("epipolar segment leaves the image")
    sx, sy = sx[inside], sy[inside]

    off = np.arange(-half, half + 1, dtype=np.float64)
    ox, oy = (g.reshape(-1) for g in np.meshgrid(off, off))
    cand = cur_frame.sample(sx[:, None] + ox[None, :], sy[:, None] + oy[None, :])
    scores = _ncc_many(ref_block.intensities.reshape(-1), cand)
    best = int(np.argmax(scores))
    if not np.isfinite(scores[best]) or scores[best] < accept_threshold:
        raise LowCorrelationError(
            f"best NCC {scores[best]:.4f} below threshold {accept_threshold}"
        )
    finite = scores[np.isfinite(scores)]
    if finite.size > 1 and float(finite.max() - finite.min()) < 1e-12:
        raise LowCorrelationError("flat correlation profile, no texture to match")
    match = np.array([sx[best], sy[best]])
    from .geometry import triangulate  # local import keeps module load light

    depth = triangulate(Pose.identity(), xi.inverse(), x_ref, match, K)
    return DepthObservation(depth=depth, frame=frame_index, pixel=match,
                            ncc=float(scores[best]))


def measurement_moments(
    d_prev_norm: float,
    t,
    f: float,
    d_ray_prev,
    a_ray_cur,
    sigma_floor: float = _SIGMA_FLOOR,
):
    """Depth-measurement mean and deviation from one-pixel sensitivity.

    Given the previous depth estimate ``d_prev_norm`` along the
    reference ray ``d_ray_prev``, the baseline vector ``t`` (reference
    camera to current camera) and the matched ray ``a_ray_cur`` from the
    current camera (both expressed in the reference frame), the match is
    perturbed by one pixel, i.e. the angle beta at the current camera
    grows by arctan(1/f), and the triangle is re-solved with the law of
    sines:

        alpha = angle(d_ray_prev, t)        gamma = pi - alpha - (beta + dbeta)
        beta  = angle(a_ray_cur, -t)        d_new = |t| sin(beta + dbeta) / sin(gamma)

    Returns (mu, sigma) with mu the average of the previous and
    perturbed depths and sigma their absolute difference, floored at
    `sigma_floor` so fusion never divides by zero.  An angle sum
    reaching pi (rays parallel within the perturbation) raises
    DegenerateGeometryError.
    """
    check_positive(d_prev_norm, "d_prev_norm")
    if not f > 0:
        raise ValueError("f must be positive")
    t = as_float_array(t, "t", shape=(3,))
    d_vec = as_float_array(d_ray_prev, "d_ray_prev", shape=(3,))
    a_vec = as_float_array(a_ray_cur, "a_ray_cur", shape=(3,))
    t_norm = float(np.linalg.norm(t))
    if t_norm < 1e-12:
        raise DegenerateGeometryError("zero baseline")
    if np.linalg.norm(d_vec) < 1e-12 or np.linalg.norm(a_vec) < 1e-12:
        raise ValueError("ray vectors must be non-zero")

    def angle(u, v):
        c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
        return math.acos(min(1.0, max(-1.0, c)))

    alpha = angle(d_vec, t)
    beta = angle(a_vec, -t)
    dbeta = math.atan(1.0 / f)
    gamma = math.pi - alpha - (beta + dbeta)
    if gamma <= 1e-12 or math.sin(gamma) < 1e-12:
        raise DegenerateGeometryError("perturbed rays no longer intersect")
    d_new = t_norm * math.sin(beta + dbeta) / math.sin(gamma)
    mu = 0.5 * (d_prev_norm + d_new)
    sigma = max(abs(d_new - d_prev_norm), sigma_floor)
    return mu, sigma


def fuse(hyp: DepthHypothesis, obs_mu: float, obs_sigma: float) -> DepthHypothesis:
    """Product of Gaussians: posterior after one depth measurement.

        mu' = (mu sigma_o^2 + obs_mu sigma^2) / (sigma^2 + sigma_o^2)
        sigma'^2 = sigma^2 sigma_o^2 / (sigma^2 + sigma_o^2)

    The posterior variance is strictly smaller than both inputs and the
    update is commutative over observation order up to round-off.
    """
    check_positive(obs_mu, "obs_mu")
    check_positive(obs_sigma, "obs_sigma")
    s2, o2 = hyp.sigma2, obs_sigma**2
    mu = (hyp.mu * o2 + obs_mu * s2) / (s2 + o2)
    sigma2 = s2 * o2 / (s2 + o2)
    return DepthHypothesis(mu, sigma2, hyp.observation_count + 1)


@dataclass(eq=False)
class WindowResult:
    hypotheses: list
    converged: np.ndarray
    dense: DenseDepthMap
    rejections: Counter = field(default_factory=Counter)


def run_depth_window(
    frames,
    poses,
    seeds,
    K: CameraIntrinsics,
    block_half: int = 2,
    ncc_threshold: float = 0.85,
    step_px: float = 0.7,
    convergence_ratio: float = 0.02,
    densify_result: bool = True,
) -> WindowResult:
    """Update seed hypotheses against every frame of a sliding window.

    `frames[0]` must be the reference frame the seed map lives on;
    `poses` are world-from-camera for each window frame.  Every seed is
    searched, converted to moments and fused per frame; rejected
    observations (out of view, low correlation, degenerate geometry)
    are recorded in `rejections` and skipped.  Hypotheses with
    sigma/mu below `convergence_ratio` are marked converged and, when at
    least three non-collinear ones exist, densified into a raster.
    """
    frames = list(frames)
    poses = list(poses)
    if len(frames) < 2:
        raise ValueError("window needs at least two frames")
    if len(frames) != len(poses):
        raise ValueError("frames and poses must align")
    ref = frames[0]
    if (ref.height, ref.width) != (seeds.reference.height, seeds.reference.width):
        raise ValueError("seed map reference does not match frames[0]")

    rays = K.ray(seeds.locations[:, 0], seeds.locations[:, 1])
    ray_norms = np.linalg.norm(rays, axis=1)
    hyps = []
    for i in range(len(seeds)):
        z = 1.0 / seeds.inv_depth[i]
        sigma_z = math.sqrt(seeds.variance[i]) * z**2  # delta method, 1/z -> z
        mu = z * ray_norms[i]
        sigma = max(sigma_z * ray_norms[i], _SIGMA_FLOOR)
        hyps.append(DepthHypothesis(mu, sigma**2))

    blocks = []
    for i in range(len(seeds)):
        blocks.append(ref.block(seeds.locations[i], block_half))

    rejections: Counter = Counter()
    world_from_ref = poses[0]
    for k in range(1, len(frames)):
        xi = poses[k].inverse().compose(world_from_ref)  # current-from-reference
        t_ref = xi.inverse().translation  # current camera centre in ref frame
        for i, hyp in enumerate(hyps):
            try:
                obs = epipolar_search(
                    hyp, blocks[i], frames[k], xi, K,
                    frame_index=k, step_px=step_px, accept_threshold=ncc_threshold,
                )
                a_cur = xi.rotation.T @ K.ray(obs.pixel[0], obs.pixel[1])
                mu_k, sigma_k = measurement_moments(
                    hyp.mu, t_ref, K.f, rays[i], a_cur
                )
                hyps[i] = fuse(hyp, mu_k, sigma_k)
            except (DegenerateGeometryError, OutOfViewError,
                    LowCorrelationError, UndefinedCorrelationError) as exc:
                rejections[type(exc).__name__] += 1

    converged = np.array(
        [h.sigma / h.mu < convergence_ratio for h in hyps], dtype=bool
    )
    dense = DenseDepthMap.empty(ref.width, ref.height)
    if densify_result and int(converged.sum()) >= 3:
        pairs = [
            (seeds.locations[i], hyps[i]) for i in range(len(hyps)) if converged[i]
        ]
        try:
            dense = densify(pairs, frames, poses, K)
        except InsufficientSeedsError:
            pass  # collinear seeds: leave the raster empty
    return WindowResult(hyps, converged, dense, rejections)


def _score_depth_candidates(ref, frames, poses, K, px, py, zs):
    """Mean multiview SSD of 3x3 blocks for candidate z-depths.

    px, py: (P,) pixel coords in the reference frame; zs: (P, C)
    candidates.  Returns (P, C) costs; inf where no other frame sees the
    block.
    """
    off = np.array([-1.0, 0.0, 1.0])
    ox, oy = (g.reshape(-1) for g in np.meshgrid(off, off))
    bx = px[:, None] + ox[None, :]
    by = py[:, None] + oy[None, :]
    ref_vals = ref.sample(bx, by)  # (P, B)
    rays = K.ray(bx, by)  # (P, B, 3)
    world_from_ref = poses[0]
    total = np.zeros(zs.shape)
    count = np.zeros(zs.shape)
    for k in range(1, len(frames)):
        xi = poses[k].inverse().compose(world_from_ref)
        p = rays[:, None, :, :] * zs[:, :, None, None]
        q = p @ xi.rotation.T + xi.translation
        z = q[..., 2]
        ok = z > 1e-9
        zsafe = np.where(ok, z, 1.0)
        u = K.f * q[..., 0] / zsafe + K.cx
        v = K.f * q[..., 1] / zsafe + K.cy
        ok &= frames[k].contains(u, v, margin=1.0)
        good = np.all(ok, axis=-1)
        cur = frames[k].sample(u, v)
        diff = ref_vals[:, None, :] - cur
        ssd = (diff**2).mean(axis=-1)
        total += np.where(good, ssd, 0.0)
        count += good
    cost = np.where(count > 0, total / np.maximum(count, 1), np.inf)
    return cost


def densify(
    converged,
    frames,
    poses,
    K: CameraIntrinsics,
) -> DenseDepthMap:
    """Propagate converged seed depths over their convex hull.

    Seeds are written into the raster (hypothesis depths converted from
    along-ray to z-depth) and stay fixed: they carry the filter's
    converged posterior, which no single photometric comparison should
    overturn.  Two raster-order propagation sweeps (forward then
    backward) then offer every other pixel its already-decided
    4-neighbour depths and their bilinear average as candidates, keep
    the one with the least multiview photometric error, and carry the
    source variance along.  All candidates are convex combinations of
    neighbour depths, so the output never leaves the seed depth range.
    Needs at least three non-collinear seeds for a hull; fewer raise
    InsufficientSeedsError.
    """
    converged = list(converged)
    if len(converged) < 3:
        raise InsufficientSeedsError(
            f"need >= 3 converged seeds, have {len(converged)}"
        )
    ref = frames[0]
    h, w = ref.height, ref.width
    depth = np.zeros((h, w))
    var = np.ones((h, w))

    pts = np.array([[float(p[0]), float(p[1])] for p, _ in converged])
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise InsufficientSeedsError(f"degenerate seed layout: {exc}") from exc

    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    hull_mask = tri.find_simplex(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1))
    hull_mask = (hull_mask >= 0).reshape(h, w)

    best_cost = np.full((h, w), np.inf)
    for p, hyp in converged:
        x, y = int(round(float(p[0]))), int(round(float(p[1])))
        if 0 <= x < w and 0 <= y < h:
            ray = K.ray(float(p[0]), float(p[1]))
            rn = float(np.linalg.norm(ray))
            depth[y, x] = hyp.mu / rn
            var[y, x] = hyp.sigma2 / rn**2
            best_cost[y, x] = -np.inf  # anchor, never replaced

    def sweep(y_range, x_range, dy, dx):
        for y in y_range:
            xs_row = np.array([x for x in x_range if hull_mask[y, x]])
            if xs_row.size == 0:
                continue
            # vectorised candidate from the previous row
            yn = y + dy
            if 0 <= yn < h:
                cand_d = depth[yn, xs_row]
                cand_v = var[yn, xs_row]
                have = cand_d > 0
                if np.any(have):
                    sel = xs_row[have]
                    zs = cand_d[have][:, None]
                    cost = _score_depth_candidates(
                        ref, frames, poses, K,
                        sel.astype(np.float64), np.full(sel.size, float(y)), zs,
                    )[:, 0]
                    better = cost < best_cost[y, sel]
                    tgt = sel[better]
                    depth[y, tgt] = cand_d[have][better]
                    var[y, tgt] = cand_v[have][better]
                    best_cost[y, tgt] = cost[better]
            # in-row scan: neighbour behind the sweep plus the bilinear
            # average with the row above
            for x in x_range:
                if not hull_mask[y, x]:
                    continue
                cands = []
                xn = x + dx
                if 0 <= xn < w and depth[y, xn] > 0:
                    cands.append((depth[y, xn], var[y, xn]))
                    if 0 <= yn < h and depth[yn, x] > 0:
                        cands.append((
                            0.5 * (depth[y, xn] + depth[yn, x]),
                            0.5 * (var[y, xn] + var[yn, x]),
                        ))
                if not cands:
                    continue
                zs = np.array([[c[0] for c in cands]])
                cost = _score_depth_candidates(
                    ref, frames, poses, K,
                    np.array([float(x)]), np.array([float(y)]), zs,
                )[0]
                j = int(np.argmin(cost))
                if cost[j] < best_cost[y, x]:
                    depth[y, x] = cands[j][0]
                    var[y, x] = cands[j][1]
                    best_cost[y, x] = cost[j]

    sweep(range(h), range(w), -1, -1)
    sweep(range(h - 1, -1, -1), range(w - 1, -1, -1), 1, 1)

    depth[~hull_mask & (depth > 0)] = 0.0
    return DenseDepthMap(depth, var)


class WindowDepthMapper(BaseEstimator):
    """Estimator wrapper around `run_depth_window`.

    fit(X, poses=..., seeds=...) consumes the window frames and exposes
    `hypotheses_`, `converged_` and `dense_` attributes.
    """

    def __init__(
        self,
        intrinsics=None,
        window=30,
        block_half=2,
        ncc_threshold=0.85,
        step_px=0.7,
        convergence_ratio=0.02,
    ):
        self.intrinsics = intrinsics
        self.window = window
        self.block_half = block_half
        self.ncc_threshold = ncc_threshold
        self.step_px = step_px
        self.convergence_ratio = convergence_ratio

    def fit(self, X, y=None, poses=None, seeds=None):
        if self.intrinsics is None:
            raise ValueError("intrinsics must be set before fitting")
        if poses is None or seeds is None:
            raise ValueError("fit requires poses= and seeds=")
        frames = list(X)[: self.window]
        poses = list(poses)[: self.window]
        result = run_depth_window(
            frames,
            poses,
            seeds,
            self.intrinsics,
            block_half=self.block_half,
            ncc_threshold=self.ncc_threshold,
            step_px=self.step_px,
            convergence_ratio=self.convergence_ratio,
        )
        self.hypotheses_ = result.hypotheses
        self.converged_ = result.converged
        self.dense_ = result.dense
        self.rejections_ = result.rejections
        return self
