"""Direct sparse image alignment for visual odometry.

A sparse inverse-depth map is attached to feature pixels of a reference
keyframe.  The relative pose of each new frame is found by minimising a
robust photometric cost

    E(xi) = sum_x huber(|| I_ref(block at x) - I_new(block at warp(x)) ||)

with Levenberg-Marquardt, where every pixel of a feature's block shares
the feature's inverse depth.  Depths start random and are refined
photometrically as frames arrive, so the map converges while tracking,
and a scalar scale reference pins the monocular gauge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .errors import InsufficientConstraintsError, NonConvergenceError
from .geometry import CameraIntrinsics, IntensityImage, Pose
from .validation import as_float_array, check_positive

# 4x4 block, symmetric sub-pixel offsets around the feature
_BLOCK_STEPS = np.array([-1.5, -0.5, 0.5, 1.5])
_OX, _OY = (g.reshape(-1) for g in np.meshgrid(_BLOCK_STEPS, _BLOCK_STEPS))
_BLOCK_MARGIN = 3.0  # offset reach 1.5 + bilinear support + slack
_MIN_ENTRIES = 6
_Z_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class FeaturePoint:
    """Pixel location plus a fixed-length descriptor vector."""

    x: float
    y: float
    descriptor: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(eq=False)
class SparseDepthMap:
    """Per-feature inverse z-depth Gaussians on a reference frame.

    `inv_depth` holds means in 1/m, `variance` their variances; both are
    refined in place while tracking.  Locations keep a margin inside the
    reference image so photometric blocks never leave the frame.
    """

    reference: IntensityImage
    locations: np.ndarray
    inv_depth: np.ndarray
    variance: np.ndarray
    prior_range: tuple = (0.1, 2.0)
    margin: float = _BLOCK_MARGIN

    def __post_init__(self):
        self.locations = as_float_array(self.locations, "locations", shape=(-1, 2))
        n = self.locations.shape[0]
        self.inv_depth = as_float_array(self.inv_depth, "inv_depth", shape=(n,))
        self.variance = as_float_array(self.variance, "variance", shape=(n,))
        if n == 0:
            raise ValueError("depth map needs at least one entry")
        if np.any(self.inv_depth <= 0):
            raise ValueError("inverse depths must be positive")
        if np.any(self.variance <= 0):
            raise ValueError("variances must be positive")
        inside = self.reference.contains(
            self.locations[:, 0], self.locations[:, 1], margin=self.margin
        )
        if not np.all(inside):
            raise ValueError("locations must keep the block margin inside the image")

    def __len__(self) -> int:
        return self.locations.shape[0]

    @property
    def z_depth(self) -> np.ndarray:
        return 1.0 / self.inv_depth

    def usable_mask(self, trust_variance=None) -> np.ndarray:
        if trust_variance is None:
            return np.ones(len(self), dtype=bool)
        return self.variance <= trust_variance

    def rescale_depth(self, factor: float) -> None:
        """Multiply all z-depths by `factor` (gauge change, in place)."""
        check_positive(factor, "factor")
        self.inv_depth /= factor
        self.variance /= factor**2
        self.prior_range = (self.prior_range[0] / factor, self.prior_range[1] / factor)

    def points(self, K: CameraIntrinsics) -> np.ndarray:
        """Camera-frame 3D points of all entries."""
        rays = K.ray(self.locations[:, 0], self.locations[:, 1])
        return rays * self.z_depth[:, None]


def initialize_depth_map(
    frame: IntensityImage,
    features,
    seed: int,
    inv_depth_range=(0.1, 2.0),
    initial_variance: float = 4.0,
    margin: float = _BLOCK_MARGIN,
) -> SparseDepthMap:
    """Seed a depth map with uniform-random inverse depths.

    Features too close to the border are dropped; dropping all of them
    (or passing none) raises ValueError.
    """
    lo, hi = float(inv_depth_range[0]), float(inv_depth_range[1])
    if not 0 < lo < hi:
        raise ValueError("inv_depth_range must satisfy 0 < lo < hi")
    check_positive(initial_variance, "initial_variance")
    pts = np.array([[f.x, f.y] for f in features], dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("no features supplied")
    keep = frame.contains(pts[:, 0], pts[:, 1], margin=margin)
    pts = pts[keep]
    if pts.shape[0] == 0:
        raise ValueError("all features fall inside the border margin")
    rng = np.random.default_rng(seed)
    inv = rng.uniform(lo, hi, size=pts.shape[0])
    var = np.full(pts.shape[0], initial_variance)
    return SparseDepthMap(frame, pts, inv, var, prior_range=(lo, hi), margin=margin)


def _block_pixels(locations: np.ndarray):
    """(N, B) pixel coordinates of all block pixels."""
    bx = locations[:, 0:1] + _OX[None, :]
    by = locations[:, 1:2] + _OY[None, :]
    return bx, by


def _reference_block_values(dmap: SparseDepthMap) -> np.ndarray:
    bx, by = _block_pixels(dmap.locations)
    return dmap.reference.sample(bx, by)


def _warp_blocks(dmap, mask, frame, K, xi):
    """Project all block pixels of masked entries into `frame`.

    Returns (pixels (N,B,2), cam points (N,B,3), valid (N,) entry mask).
    Entries whose block leaves the frame or dips behind the camera are
    dropped from the photometric sum.
    """
    bx, by = _block_pixels(dmap.locations)
    rays = K.ray(bx, by)  # (N, B, 3)
    p_ref = rays / dmap.inv_depth[:, None, None]
    q = p_ref @ xi.rotation.T + xi.translation
    z = q[..., 2]
    ok = z > _Z_EPS
    zs = np.where(ok, z, 1.0)
    px = K.f * q[..., 0] / zs + K.cx
    py = K.f * q[..., 1] / zs + K.cy
    ok &= frame.contains(px, py, margin=1.0)
    valid = mask & np.all(ok, axis=1)
    return np.stack([px, py], axis=-1), q, valid


def residuals_and_jacobian(
    dmap: SparseDepthMap,
    frame: IntensityImage,
    K: CameraIntrinsics,
    xi: Pose,
    huber_delta: float = 0.1,
    trust_variance=None,
):
    """Robust-weighted photometric residuals and their pose Jacobian.

    Residuals are I_ref - I_new at all block pixels of usable entries,
    scaled by sqrt of the Huber weight of the entry's block norm.  The
    Jacobian is with respect to a left-multiplied twist increment
    [vx vy vz wx wy wz] of `xi` and matches central finite differences
    of the residuals away from bilinear cell boundaries.

    Returns (residuals (M,), jacobian (M, 6), valid entry mask (N,)).
    """
    check_positive(huber_delta, "huber_delta")
    mask = dmap.usable_mask(trust_variance)
    pixels, q, valid = _warp_blocks(dmap, mask, frame, K, xi)
    if not np.any(valid):
        return np.zeros(0), np.zeros((0, 6)), valid
    ref_vals = _reference_block_values(dmap)[valid]
    px = pixels[valid]
    qv = q[valid]
    cur, gx, gy = frame.sample_with_gradient(px[..., 0], px[..., 1])
    r = ref_vals - cur  # (n, B)

    norms = np.linalg.norm(r, axis=1)
    w = np.where(norms <= huber_delta, 1.0, huber_delta / np.maximum(norms, 1e-300))
    sw = np.sqrt(w)[:, None]

    z = qv[..., 2]
    fz = K.f / z
    a1 = fz * gx
    a2 = fz * gy
    a3 = -fz * (gx * qv[..., 0] + gy * qv[..., 1]) / z
    a = np.stack([a1, a2, a3], axis=-1)  # (n, B, 3) image gradient wrt q
    jac = np.concatenate([-a, np.cross(a, qv)], axis=-1)  # (n, B, 6)

    res = (r * sw).reshape(-1)
    jac = (jac * sw[..., None]).reshape(-1, 6)
    return res, jac, valid


def photometric_cost(
    dmap: SparseDepthMap,
    frame: IntensityImage,
    K: CameraIntrinsics,
    xi: Pose,
    huber_delta: float = 0.1,
    trust_variance=None,
    min_entries: int = _MIN_ENTRIES,
) -> float:
    """Huber-robust block photometric cost of a candidate relative pose.

    Returns +inf when fewer than `min_entries` map entries stay in view,
    so callers can reject poses that lose the constraint budget.
    """
    mask = dmap.usable_mask(trust_variance)
    pixels, _, valid = _warp_blocks(dmap, mask, frame, K, xi)
    if int(valid.sum()) < min_entries:
        return float("inf")
    ref_vals = _reference_block_values(dmap)[valid]
    px = pixels[valid]
    cur = frame.sample(px[..., 0], px[..., 1])
    norms = np.linalg.norm(ref_vals - cur, axis=1)
    small = norms <= huber_delta
    cost = 0.5 * np.sum(norms[small] ** 2)
    cost += np.sum(huber_delta * (norms[~small] - 0.5 * huber_delta))
    return float(cost)


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    pose: Pose
    final_cost: float
    iterations: int
    cost_history: tuple


def estimate_relative_pose(
    dmap: SparseDepthMap,
    frame: IntensityImage,
    K: CameraIntrinsics,
    initial_guess: Pose | None = None,
    huber_delta: float = 0.1,
    trust_variance=None,
    damping: float = 1e-3,
    damping_factor: float = 10.0,
    damping_cap: float = 1e10,
    max_iterations: int = 50,
    step_tolerance: float = 1e-8,
) -> AlignmentResult:
    """Levenberg-Marquardt minimisation of the photometric cost.

    Steps are accepted only when the true robust cost decreases, which
    makes the recorded cost history monotone by construction.  Damping
    grows on rejection; exceeding `damping_cap` raises
    NonConvergenceError carrying the best pose found so far.
    """
    usable = int(dmap.usable_mask(trust_variance).sum())
    if usable < _MIN_ENTRIES:
        raise InsufficientConstraintsError(
            f"need >= {_MIN_ENTRIES} trusted map entries, have {usable}"
        )
    xi = initial_guess if initial_guess is not None else Pose.identity()
    cost = photometric_cost(dmap, frame, K, xi, huber_delta, trust_variance)
    if not math.isfinite(cost):
        raise InsufficientConstraintsError(
            "initial pose leaves too few map entries in view"
        )
    lam = damping
    history = [cost]
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        res, jac, _ = residuals_and_jacobian(
            dmap, frame, K, xi, huber_delta, trust_variance
        )
        h = jac.T @ jac
        g = jac.T @ res
        while True:
            try:
                step = np.linalg.solve(h + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                step = None
            candidate = Pose.exp(step).compose(xi) if step is not None else None
            cand_cost = (
                photometric_cost(dmap, frame, K, candidate, huber_delta, trust_variance)
                if candidate is not None
                else float("inf")
            )
            if cand_cost < cost:
                xi, cost = candidate, cand_cost
                history.append(cost)
                lam = max(lam / damping_factor, 1e-12)
                break
            lam *= damping_factor
            if lam > damping_cap:
                raise NonConvergenceError(
                    "LM damping exceeded cap", best_pose=xi, best_cost=cost
                )
            if step is not None and np.linalg.norm(step) < step_tolerance:
                # no smaller step can help; treat as converged
                return AlignmentResult(xi, cost, iterations, tuple(history))
        if np.linalg.norm(step) < step_tolerance:
            break
    return AlignmentResult(xi, cost, iterations, tuple(history))


def refine_depths(
    dmap: SparseDepthMap,
    views,
    K: CameraIntrinsics,
    xi: Pose | None = None,
    global_search: bool = False,
    n_candidates: int = 49,
    gn_steps: int = 2,
    photometric_sigma: float = 0.05,
) -> None:
    """Photometric refinement of the map's inverse depths, in place.

    `views` is either a single frame (with its pose in `xi`) or a list
    of (frame, pose) pairs; costs and Gauss-Newton terms are summed over
    all views.  Joint multi-view fitting matters on planar scenes: a
    single pair of views admits a family of wrong pose/depth
    combinations that reproduce the image exactly, and per-frame
    refitting would follow it.  With `global_search` every entry is
    first scored over a dense grid of candidate inverse depths spanning
    the prior range, which makes the step robust to arbitrary
    initialisation; Gauss-Newton polishing follows either way.
    Variances shrink with the Gauss-Newton curvature, fused as Gaussian
    precisions with noise level `photometric_sigma`.  Entries seen by no
    view are left untouched.
    """
    if isinstance(views, IntensityImage):
        if xi is None:
            raise ValueError("single-frame refinement needs xi")
        views = [(views, xi)]
    views = list(views)
    if not views:
        raise ValueError("need at least one view")
    ref_vals = _reference_block_values(dmap)
    bx, by = _block_pixels(dmap.locations)
    rays = K.ray(bx, by)  # (N, B, 3)

    def view_terms(inv, frame, pose):
        p = rays / inv[:, None, None]
        q = p @ pose.rotation.T + pose.translation
        z = q[..., 2]
        ok = z > _Z_EPS
        zs = np.where(ok, z, 1.0)
        px = K.f * q[..., 0] / zs + K.cx
        py = K.f * q[..., 1] / zs + K.cy
        ok &= frame.contains(px, py, margin=1.0)
        return q, zs, px, py, ok

    def block_cost(inv_d):
        # inv_d: (N, C) candidate inverse depths -> (N, C) summed SSD
        total = np.zeros(inv_d.shape)
        seen = np.zeros(inv_d.shape, dtype=bool)
        for frame, pose in views:
            p = rays[:, None, :, :] / inv_d[:, :, None, None]
            q = p @ pose.rotation.T + pose.translation
            z = q[..., 2]
            ok = z > _Z_EPS
            zs = np.where(ok, z, 1.0)
            px = K.f * q[..., 0] / zs + K.cx
            py = K.f * q[..., 1] / zs + K.cy
            ok &= frame.contains(px, py, margin=1.0)
            cur = frame.sample(px, py)
            diff = np.where(ok, ref_vals[:, None, :] - cur, 0.0)
            full = ok.sum(axis=-1) == _OX.size
            total += np.where(full, (diff**2).sum(axis=-1), 0.0)
            seen |= full
        return np.where(seen, total, np.inf)

    if global_search:
        lo, hi = dmap.prior_range
        grid = np.geomspace(lo / 2.0, hi * 2.0, n_candidates)
        cand = np.broadcast_to(grid, (len(dmap), n_candidates))
        costs = block_cost(np.ascontiguousarray(cand))
        best = np.argmin(costs, axis=1)
        finite = np.isfinite(costs[np.arange(len(dmap)), best])
        dmap.inv_depth[finite] = cand[np.arange(len(dmap)), best][finite]

    for _ in range(max(0, gn_steps)):
        inv = dmap.inv_depth
        jtj = np.zeros(len(dmap))
        jtr = np.zeros(len(dmap))
        entry_ok = np.zeros(len(dmap), dtype=bool)
        for frame, pose in views:
            q, zs, px, py, ok = view_terms(inv, frame, pose)
            view_entry = np.all(ok, axis=1)
            if not np.any(view_entry):
                continue
            cur, gx, gy = frame.sample_with_gradient(px, py)
            r = ref_vals - cur  # (N, B)
            # q = R ray / inv + t and d(1/inv)/d inv = -1/inv^2
            dq = (rays @ pose.rotation.T) * (-1.0 / inv[:, None, None] ** 2)
            dpx = K.f * (dq[..., 0] * zs - q[..., 0] * dq[..., 2]) / zs**2
            dpy = K.f * (dq[..., 1] * zs - q[..., 1] * dq[..., 2]) / zs**2
            j = -(gx * dpx + gy * dpy)  # d r / d inv_depth
            j = np.where(ok, j, 0.0)
            r = np.where(ok, r, 0.0)
            jtj += np.where(view_entry, (j * j).sum(axis=1), 0.0)
            jtr += np.where(view_entry, (j * r).sum(axis=1), 0.0)
            entry_ok |= view_entry
        good = entry_ok & (jtj > 1e-12)
        if not np.any(good):
            return
        step = np.zeros(len(dmap))
        step[good] = -jtr[good] / jtj[good]
        new_inv = np.clip(
            dmap.inv_depth + step, dmap.inv_depth * 0.2, dmap.inv_depth * 5.0
        )
        # stay inside the prior envelope: with short baselines the
        # photometric slope barely constrains depth and unclamped steps
        # can run away toward infinity (pure-rotation explanations)
        lo, hi = dmap.prior_range
        new_inv = np.clip(new_inv, lo / 2.0, hi * 2.0)
        dmap.inv_depth = np.where(good, new_inv, dmap.inv_depth)
        # Gaussian precision update with the final curvature
        meas_prec = jtj / photometric_sigma**2
        post = 1.0 / (1.0 / dmap.variance[good] + meas_prec[good])
        dmap.variance[good] = np.maximum(post, 1e-12)


def _project_map_to_plane(dmap: SparseDepthMap, K: CameraIntrinsics) -> bool:
    """Replace map depths by their best-fit-plane depths, in place.

    Fits n . p = h to the map's camera-frame points by least squares and
    re-derives every depth from the plane.  Returns False (map
    untouched) when the fit is degenerate or the plane puts entries
    behind the camera / far outside the prior envelope, which is what
    the wall-like mirror solution of a two-view homography does.
    """
    p = dmap.points(K)
    try:
        m, *_ = np.linalg.lstsq(p, np.ones(len(dmap)), rcond=None)
    except np.linalg.LinAlgError:
        return False
    norm = float(np.linalg.norm(m))
    if norm < 1e-9:
        return False
    h = 1.0 / norm
    n = m * h
    rays = K.ray(dmap.locations[:, 0], dmap.locations[:, 1])
    denom = rays @ n
    lo, hi = dmap.prior_range
    with np.errstate(divide="ignore"):
        z = np.where(np.abs(denom) > 1e-12, h / denom, -1.0)
    ok = (z > 0) & (1.0 / np.maximum(z, 1e-12) >= lo / 2.0) & (
        1.0 / np.maximum(z, 1e-12) <= hi * 2.0
    )
    if float(ok.mean()) < 0.7:
        return False
    dmap.inv_depth = np.where(ok, 1.0 / np.where(ok, z, 1.0), dmap.inv_depth)
    return True


def select_grid_features(
    image: IntensityImage,
    n_features: int = 150,
    margin: float = _BLOCK_MARGIN,
    descriptor_half: int = 1,
) -> list:
    """Pick the strongest-gradient pixel per grid cell.

    A deterministic stand-in for an interest-point detector: the image
    is tiled into roughly square cells and the pixel with the largest
    gradient magnitude inside each cell is emitted, with a small
    intensity patch as descriptor.
    """
    v = image.values
    gy, gx = np.gradient(v)
    mag = np.hypot(gx, gy)
    m = int(math.ceil(margin))
    mag[:m, :] = -1.0
    mag[-m:, :] = -1.0
    mag[:, :m] = -1.0
    mag[:, -m:] = -1.0
    cols = max(1, int(round(math.sqrt(n_features * image.width / image.height))))
    rows = max(1, int(math.ceil(n_features / cols)))
    xs = np.linspace(0, image.width, cols + 1).astype(int)
    ys = np.linspace(0, image.height, rows + 1).astype(int)
    feats = []
    for i in range(rows):
        for j in range(cols):
            cell = mag[ys[i] : ys[i + 1], xs[j] : xs[j + 1]]
            if cell.size == 0 or cell.max() <= 0:
                continue
            dy, dx = np.unravel_index(int(np.argmax(cell)), cell.shape)
            x, y = xs[j] + dx, ys[i] + dy
            d = descriptor_half
            patch = v[y - d : y + d + 1, x - d : x + d + 1].reshape(-1)
            feats.append(FeaturePoint(float(x), float(y), patch.copy()))
    return feats[:n_features] if len(feats) > n_features else feats


def _normalize_provider(features_per_frame):
    if callable(features_per_frame):
        return features_per_frame
    seq = list(features_per_frame)

    def provider(index, _image):
        return seq[index]

    return provider


def _planar_terms(ref_vals, rays, far_frame, K, xi, m, huber_delta,
                  with_jacobian):
    """Residuals (and Jacobian) of the joint pose+plane warp.

    Depths come from the plane `m` (inverse depth = m . ray, i.e.
    m = n / h), each block pixel with its own planar depth, so the warp
    is an exact homography.  Parameters are a 6-twist of `xi` followed
    by the 3 plane coefficients.
    """
    md = rays @ m  # (N, B)
    ok = md > 1e-9
    p = rays / np.where(ok, md, 1.0)[..., None]
    q = p @ xi.rotation.T + xi.translation
    z = q[..., 2]
    ok &= z > _Z_EPS
    zs = np.where(ok, z, 1.0)
    px = K.f * q[..., 0] / zs + K.cx
    py = K.f * q[..., 1] / zs + K.cy
    ok &= far_frame.contains(px, py, margin=1.0)
    valid = np.all(ok, axis=1)
    if not np.any(valid):
        return None
    if not with_jacobian:
        cur = far_frame.sample(px[valid], py[valid])
        norms = np.linalg.norm(ref_vals[valid] - cur, axis=1)
        small = norms <= huber_delta
        cost = 0.5 * np.sum(norms[small] ** 2)
        cost += np.sum(huber_delta * (norms[~small] - 0.5 * huber_delta))
        return float(cost), int(valid.sum())
    cur, gx, gy = far_frame.sample_with_gradient(px[valid], py[valid])
    r = ref_vals[valid] - cur
    norms = np.linalg.norm(r, axis=1)
    w = np.where(norms <= huber_delta, 1.0, huber_delta / np.maximum(norms, 1e-300))
    sw = np.sqrt(w)[:, None]
    qv = q[valid]
    zv = zs[valid]
    fz = K.f / zv
    a1 = fz * gx
    a2 = fz * gy
    a3 = -fz * (gx * qv[..., 0] + gy * qv[..., 1]) / zv
    a = np.stack([a1, a2, a3], axis=-1)
    j_pose = np.concatenate([-a, np.cross(a, qv)], axis=-1)  # (n, B, 6)
    # dq/dm_j = -(q - t) ray_j / (m . ray)
    s = np.einsum("nbk,nbk->nb", a, qv - xi.translation) / md[valid]
    j_plane = s[..., None] * rays[valid]  # (n, B, 3)
    jac = np.concatenate([j_pose, j_plane], axis=-1)
    res = (r * sw).reshape(-1)
    jac = (jac * sw[..., None]).reshape(-1, 9)
    return res, jac, float(np.sum(
        np.where(norms <= huber_delta, 0.5 * norms**2,
                 huber_delta * (norms - 0.5 * huber_delta))
    ))


def estimate_planar_pose(
    dmap: SparseDepthMap,
    far_frame: IntensityImage,
    K: CameraIntrinsics,
    xi0: Pose,
    m0,
    huber_delta: float = 0.1,
    max_iterations: int = 100,
    damping: float = 1e-3,
    damping_factor: float = 10.0,
    damping_cap: float = 1e10,
    step_tolerance: float = 1e-10,
):
    """Joint pose-and-plane photometric alignment (9-dof LM).

    The scene is modelled as one plane with coefficient vector
    m = n / h (inverse depth of a pixel is m . ray).  Joint optimisation
    follows the pose/structure valley that defeats alternating schemes
    on planar scenes.  Returns (pose, m, cost); the monocular scale
    gauge (t, m) -> (s t, m / s) is left to the caller to fix.
    """
    ref_vals = _reference_block_values(dmap)
    bx, by = _block_pixels(dmap.locations)
    rays = K.ray(bx, by)
    m = as_float_array(m0, "m0", shape=(3,)).copy()
    xi = xi0
    out = _planar_terms(ref_vals, rays, far_frame, K, xi, m, huber_delta, False)
    if out is None or out[1] < _MIN_ENTRIES:
        raise InsufficientConstraintsError("planar alignment has no valid entries")
    cost = out[0]
    lam = damping
    for _ in range(max_iterations):
        terms = _planar_terms(ref_vals, rays, far_frame, K, xi, m, huber_delta, True)
        if terms is None:
            break
        res, jac, _ = terms
        h = jac.T @ jac
        g = jac.T @ res
        improved = False
        while lam <= damping_cap:
            try:
                step = np.linalg.solve(h + lam * np.eye(9), -g)
            except np.linalg.LinAlgError:
                lam *= damping_factor
                continue
            cand_xi = Pose.exp(step[:6]).compose(xi)
            cand_m = m + step[6:]
            out = _planar_terms(
                ref_vals, rays, far_frame, K, cand_xi, cand_m, huber_delta, False
            )
            cand_cost = math.inf if out is None or out[1] < _MIN_ENTRIES else out[0]
            if cand_cost < cost:
                xi, m, cost = cand_xi, cand_m, cand_cost
                lam = max(lam / damping_factor, 1e-12)
                improved = True
                break
            lam *= damping_factor
            if np.linalg.norm(step) < step_tolerance:
                return xi, m, cost
        if not improved or np.linalg.norm(step) < step_tolerance:
            break
    return xi, m, cost


def _homography_decompositions(h):
    """Both physical factorizations of a calibrated homography.

    H = R + t n^T (unit n, plane at unit distance) admits exactly two
    factorizations up to the joint sign of (t, n); all four variants are
    returned so the caller can keep the cheirality-consistent one.
    Empty when H is within numerical noise of a pure rotation, where the
    plane is undetermined.
    """
    s = np.linalg.svd(h, compute_uv=False)
    hn = h / s[1]
    w, vecs = np.linalg.eigh(hn.T @ hn)  # ascending eigenvalues
    s3sq, _, s1sq = w
    if s1sq - s3sq < 1e-9:
        return []
    v1, v2, v3 = vecs[:, 2], vecs[:, 1], vecs[:, 0]
    a = math.sqrt(max(0.0, 1.0 - s3sq))
    b = math.sqrt(max(0.0, s1sq - 1.0))
    scale = math.sqrt(s1sq - s3sq)
    out = []
    for sign in (1.0, -1.0):
        u = (a * v1 + sign * b * v3) / scale
        n = np.cross(v2, u)
        basis = np.stack([v2, u, n], axis=1)
        image = np.stack([hn @ v2, hn @ u, np.cross(hn @ v2, hn @ u)], axis=1)
        r = image @ basis.T
        t = (hn - r) @ n
        for flip in (1.0, -1.0):
            out.append((r, flip * t, flip * n))
    return out


def _reinitialize_structure(
    dmap: SparseDepthMap,
    far_frame: IntensityImage,
    K: CameraIntrinsics,
    xi_guess: Pose,
    anchor,
    initial_variance: float,
    huber_delta: float,
):
    """Wide-baseline re-initialisation of the map (delayed init).

    At small baselines the planar flow field admits a continuum of
    pose/structure explanations, so whatever the bootstrap picked may be
    wrong by a large factor while fitting the images exactly.  Once the
    baseline to `far_frame` is wide enough the joint pose+plane
    alignment pins the homography H = R + t m^T exactly; the remaining
    (t, m) -> (s t, m / s) split is the monocular gauge, which no image
    can decide, so it is fixed by the caller's anchor and the pose is
    rescaled by the same factor.
    """
    rays = K.ray(dmap.locations[:, 0], dmap.locations[:, 1])
    p = dmap.points(K)
    m_fit, *_ = np.linalg.lstsq(p, np.ones(len(dmap)), rcond=None)

    def plane_through(n0):
        # plane with normal n0 through the current point cloud
        n0 = n0 / np.linalg.norm(n0)
        h0 = float(np.mean(p @ n0))
        return n0 / h0 if h0 > 1e-6 else None

    # several orientation starts: the fitted plane can sit so far off
    # (after a wrong bootstrap) that LM falls into the mirror
    # decomposition of the homography, which cheirality then rejects.
    # A level-ground start encodes the platform prior (camera above the
    # ground, y axis roughly downward), the mean-ray start a
    # fronto-parallel surface.
    starts = [m_fit]
    for n0 in (np.array([0.0, 1.0, 0.0]), np.mean(rays, axis=0)):
        mc = plane_through(n0)
        if mc is not None:
            starts.append(mc)
    candidates = []
    mirror = None

    def consider(xi0, m0):
        nonlocal mirror
        try:
            xi_c, m_c, cost_c = estimate_planar_pose(
                dmap, far_frame, K, xi0, m0, huber_delta
            )
        except (NonConvergenceError, InsufficientConstraintsError):
            return
        if float((rays @ m_c > 1e-9).mean()) < 0.9:
            # mirror factorization: plane puts entries behind the camera
            if mirror is None or cost_c < mirror[0]:
                mirror = (cost_c, xi_c, m_c)
            return
        candidates.append((cost_c, xi_c, m_c))

    for m0 in starts:
        consider(xi_guess, m0)
    if not candidates and mirror is not None:
        # every start fell into the non-physical factorization of the
        # homography; its twin is analytic, so polish from there instead
        _, xi_m, m_m = mirror
        h = xi_m.rotation + np.outer(xi_m.translation, m_m)
        for r_d, t_d, n_d in _homography_decompositions(h):
            if float((rays @ n_d > 1e-9).mean()) < 0.9:
                continue
            consider(Pose(r_d, t_d), n_d)
    if not candidates:
        return dmap, xi_guess
    # distinct basins can share the interpolation-error cost floor when
    # the baseline is a few percent of depth, so cost alone cannot rank
    # them; among near-floor candidates keep the one closest to the
    # platform prior of a roughly level ground below the camera
    floor = min(c[0] for c in candidates) * 3.0 + 1e-12
    _, xi, m = max(
        (c for c in candidates if c[0] <= floor),
        key=lambda c: c[2][1] / np.linalg.norm(c[2]),
    )
    md = rays @ m
    good = md > 1e-9
    lo, hi = dmap.prior_range
    dmap.inv_depth = np.where(good, np.clip(md, lo / 2.0, hi * 2.0),
                              dmap.inv_depth)
    dmap.variance = np.full(len(dmap), initial_variance / 16.0)
    z_before = float(np.mean(dmap.z_depth))
    anchor(dmap)
    factor = float(np.mean(dmap.z_depth)) / z_before
    # the pose and the map share one gauge; releasing depths from the
    # plane again here would only hand the next photometric fit a knob
    # to re-absorb pose error with, so leave relaxation to the windowed
    # refinement the tracking loop runs on every following frame
    return dmap, Pose(xi.rotation, xi.translation * factor)


def track_sequence(
    frames,
    K: CameraIntrinsics,
    features_per_frame=None,
    scale_ref: float | None = None,
    seed: int = 0,
    keyframe_interval: int = 10,
    inv_depth_range=(0.1, 2.0),
    initial_variance: float = 4.0,
    bootstrap_rounds: int = 3,
    huber_delta: float = 0.1,
) -> list:
    """Track a frame sequence; returns world-from-camera poses.

    Frame 0 is the identity and defines the world frame.  The keyframe
    depth map is re-seeded every `keyframe_interval` frames with depths
    transferred from the previous map.  On the first frame pair, pose
    estimation alternates with global photometric depth search so the
    randomly initialised map can converge, and `scale_ref` (the metric
    mean scene depth of the reference view, e.g. from an altimeter or
    synthetic truth) pins the monocular scale; without it the gauge is
    left at the prior's scale.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if keyframe_interval < 1:
        raise ValueError("keyframe_interval must be >= 1")
    provider = _normalize_provider(
        features_per_frame
        if features_per_frame is not None
        else (lambda i, img: select_grid_features(img))
    )

    gauge = [scale_ref]  # mean map depth the current keyframe is pinned to

    def anchor(dmap):
        if gauge[0] is not None:
            dmap.rescale_depth(gauge[0] / float(np.mean(dmap.z_depth)))

    dmap = initialize_depth_map(
        frames[0], provider(0, frames[0]), seed, inv_depth_range, initial_variance
    )
    anchor(dmap)

    poses = [Pose.identity()]
    key_idx = 0
    xi_chain: list[Pose] = [Pose.identity()]  # xi of key frame and successors
    history: list = []  # (frame, xi) seen since the current keyframe

    for k in range(1, len(frames)):
        if len(xi_chain) >= 3:
            last, prev = xi_chain[-1], xi_chain[-2]
            guess = last.compose(prev.inverse()).compose(last)
        else:
            guess = xi_chain[-1]
        frame = frames[k]
        if key_idx == 0 and k == 1:
            # first-pair bootstrap.  With free per-feature depths a tiny
            # baseline admits a continuum of wrong pose/depth pairs that
            # reproduce the image to within interpolation error, so the
            # alternation is constrained to a plane (the scene model this
            # system assumes anyway); the planar family is discrete and
            # the mirror solution is rejected inside the projection step.
            xi = None
            for r in range(max(1, bootstrap_rounds)):
                xi = estimate_relative_pose(
                    dmap, frame, K, guess if xi is None else xi, huber_delta
                ).pose
                refine_depths(dmap, frame, K, xi, global_search=(r == 0))
                _project_map_to_plane(dmap, K)
                anchor(dmap)
        else:
            xi = estimate_relative_pose(dmap, frame, K, guess, huber_delta).pose
            # depths must stay consistent with every frame of the
            # keyframe's window at once; refitting against only the
            # newest frame would track the two-view planar ambiguity.
            # The search stays global while the first keyframe is alive
            # so growing baselines can pull the map out of that valley.
            refine_depths(
                dmap,
                history[-3:] + [(frame, xi)],
                K,
                global_search=(key_idx == 0),
            )
        # the gauge is unobservable within a keyframe, so pin it: to the
        # caller's scale reference on the first keyframe, afterwards to
        # the mean depth each keyframe inherited through the pose chain
        anchor(dmap)
        xi = estimate_relative_pose(dmap, frame, K, xi, huber_delta).pose

        if k == min(key_idx + keyframe_interval, len(frames) - 1):
            # the baseline over this keyframe's window is now at its
            # widest, so the joint pose+plane fit is least ambiguous;
            # re-derive structure against this frame and retro-correct
            # the frames tracked inside the window
            dmap, xi = _reinitialize_structure(
                dmap, frame, K, xi, anchor, initial_variance, huber_delta
            )
            retro = []
            prev = Pose.identity()
            for j in range(key_idx + 1, k):
                prev = estimate_relative_pose(
                    dmap, frames[j], K, prev, huber_delta
                ).pose
                poses[j] = poses[key_idx].compose(prev.inverse())
                retro.append((frames[j], prev))
            xi_chain = [Pose.identity()] + [x for _, x in retro]
            history = retro

        poses.append(poses[key_idx].compose(xi.inverse()))
        xi_chain.append(xi)
        history.append((frame, xi))

        if k - key_idx >= keyframe_interval and k < len(frames) - 1:
            dmap = _reseed_keyframe(
                dmap, frame, provider(k, frame), K, xi, initial_variance
            )
            key_idx = k
            xi_chain = [Pose.identity()]
            history = []
            gauge[0] = float(np.mean(dmap.z_depth))
    return poses


def _reseed_keyframe(dmap, frame, features, K, xi, initial_variance):
    """New keyframe map with depths transferred through the pose chain.

    When the old map is planar the fitted plane itself is transformed
    (inverse z-depth of a plane is exact and smooth everywhere in the
    new view); otherwise depths hop to the nearest projected old entry,
    which quantises depth by feature spacing and is only a fallback.
    """
    pts = np.array([[f.x, f.y] for f in features], dtype=np.float64).reshape(-1, 2)
    keep = frame.contains(pts[:, 0], pts[:, 1], margin=dmap.margin)
    pts = pts[keep]
    if pts.shape[0] == 0:
        raise InsufficientConstraintsError("no usable features for keyframe")
    p = dmap.points(K)

    m_fit, *_ = np.linalg.lstsq(p, np.ones(len(dmap)), rcond=None)
    if math.sqrt(float(np.mean((p @ m_fit - 1.0) ** 2))) < 0.05:
        # m . p = 1 in the old frame, q = R p + t  =>  m' = R m / (1 + (R m) . t)
        rm = xi.rotation @ m_fit
        denom = 1.0 + float(rm @ xi.translation)
        if abs(denom) > 1e-9:
            m_new = rm / denom
            rays = K.ray(pts[:, 0], pts[:, 1])
            inv = rays @ m_new
            if float((inv > 1e-6).mean()) > 0.9:
                good = inv > 1e-6
                pts, inv = pts[good], inv[good]
                var = np.full(inv.shape, initial_variance / 16.0)
                lo = float(max(1e-6, inv.min() * 0.5))
                return SparseDepthMap(
                    frame, pts, inv, var,
                    prior_range=(lo, float(inv.max() * 2.0)), margin=dmap.margin,
                )

    q = xi.transform(p)
    z = q[:, 2]
    ok = z > _Z_EPS
    px = K.f * q[:, 0] / np.where(ok, z, 1.0) + K.cx
    py = K.f * q[:, 1] / np.where(ok, z, 1.0) + K.cy
    ok &= frame.contains(px, py, margin=1.0)
    if not np.any(ok):
        raise InsufficientConstraintsError("no depth could be transferred")
    src = np.stack([px[ok], py[ok]], axis=1)
    src_inv = 1.0 / z[ok]
    src_var = np.minimum(dmap.variance[ok] * 4.0, initial_variance)
    med_inv = float(np.median(src_inv))
    d2 = ((pts[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    near_ok = d2[np.arange(pts.shape[0]), nearest] <= 8.0**2
    inv = np.where(near_ok, src_inv[nearest], med_inv)
    var = np.where(near_ok, src_var[nearest], initial_variance)
    lo = float(max(1e-6, inv.min() * 0.5))
    return SparseDepthMap(
        frame, pts, inv, var, prior_range=(lo, float(inv.max() * 2.0)),
        margin=dmap.margin,
    )


class VisualOdometry(BaseEstimator):
    """Estimator wrapper around `track_sequence`.

    Parameters mirror the function arguments; `fit` consumes an ordered
    sequence of IntensityImage (or a (T, H, W) float array) and exposes
    the estimated world-from-camera trajectory as `poses_`.
    """

    def __init__(
        self,
        intrinsics=None,
        scale_ref=None,
        seed=0,
        keyframe_interval=10,
        n_features=150,
        huber_delta=0.1,
    ):
        self.intrinsics = intrinsics
        self.scale_ref = scale_ref
        self.seed = seed
        self.keyframe_interval = keyframe_interval
        self.n_features = n_features
        self.huber_delta = huber_delta

    def fit(self, X, y=None, features=None):
        if self.intrinsics is None:
            raise ValueError("intrinsics must be set before fitting")
        frames = [
            x if isinstance(x, IntensityImage) else IntensityImage(np.asarray(x))
            for x in X
        ]
        provider = features
        if provider is None:
            n = self.n_features

            def provider(i, img):
                return select_grid_features(img, n_features=n)

        self.poses_ = track_sequence(
            frames,
            self.intrinsics,
            provider,
            scale_ref=self.scale_ref,
            seed=self.seed,
            keyframe_interval=self.keyframe_interval,
            huber_delta=self.huber_delta,
        )
        self.n_frames_ = len(frames)
        return self
