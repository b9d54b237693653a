"""Ground-plane estimation and footpoint back-projection.

The camera-frame ground plane {p : n . p = h} is fitted to 3D samples
back-projected from the dense depth raster underneath detected objects,
using the closed-form least-squares normal (Cramer's rule on the 2x2
normal equations of z = Ax + By + C).  Object positions follow by
intersecting the box bottom-centre ray with the plane:

    c = h * K^-1 b / (n . K^-1 b)

Planes are kept in a canonical orientation with h > 0, which for the
y-down camera frame means the normal has a downward (positive-y-ish)
component; a level camera at height h above flat ground is
(n, h) = ((0, 1, 0), h).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .depth import DenseDepthMap
from .errors import DegenerateSamplesError, HorizonError, NoSupportError
from .geometry import CameraIntrinsics, Pose
from .validation import as_float_array, check_positive

_DEGENERATE_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class GroundPlane:
    """Camera-frame plane n . p = h_cam with unit n and h_cam > 0."""

    normal: np.ndarray
    h_cam: float

    def __post_init__(self):
        n = as_float_array(self.normal, "normal", shape=(3,))
        norm = float(np.linalg.norm(n))
        if norm < _DEGENERATE_NORM:
            raise ValueError("normal must be non-zero")
        h = float(self.h_cam)
        if not math.isfinite(h) or h == 0.0:
            raise ValueError("h_cam must be finite and non-zero")
        n = n / norm
        if h < 0:  # same point set, canonical sign
            n, h = -n, -h
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "h_cam", h)

    @property
    def pitch_rad(self) -> float:
        """Camera pitch from the normal, via h = y cos(theta) - z sin(theta)."""
        return math.atan2(-self.normal[2], self.normal[1])

    @property
    def pitch_deg(self) -> float:
        return math.degrees(self.pitch_rad)

    @classmethod
    def level(cls, height: float) -> "GroundPlane":
        """Flat-ground assumption: zero pitch at the given camera height."""
        check_positive(height, "height")
        return cls(np.array([0.0, 1.0, 0.0]), height)

    def height_of(self, points) -> np.ndarray:
        """n . p for camera-frame point(s); equals h_cam on the plane."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.normal


@dataclass(frozen=True, eq=False)
class GroundSample:
    """One back-projected depth sample (camera-frame metres)."""

    x: float
    y: float
    z_bar: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z_bar])


def patch_samples(
    det,
    depth_map: DenseDepthMap,
    K: CameraIntrinsics,
    patch_frac: float = 1.0 / 3.0,
) -> list:
    """Ground samples under a detection's feet.

    The sampled patch is the rectangle of the box width and height
    `patch_frac * box_height`, centred at the box's bottom-centre.
    Every pixel inside it with a known depth is back-projected to a
    camera-frame (x, y, z_bar) sample.  `det` may be anything exposing
    a `box` attribute or a plain (x, y, w, h) array.  A patch without a
    single known-depth pixel raises NoSupportError.
    """
    box = as_float_array(getattr(det, "box", det), "box", shape=(4,))
    if box[2] <= 0 or box[3] <= 0:
        raise ValueError("box must have positive size")
    check_positive(patch_frac, "patch_frac")
    bx, by, bw, bh = box
    cx = bx + bw / 2.0
    cy = by + bh
    half_h = bh * patch_frac / 2.0
    x0 = int(math.ceil(cx - bw / 2.0))
    x1 = int(math.floor(cx + bw / 2.0))
    y0 = int(math.ceil(cy - half_h))
    y1 = int(math.floor(cy + half_h))
    x0 = max(x0, 0)
    y0 = max(y0, 0)
    x1 = min(x1, depth_map.width - 1)
    y1 = min(y1, depth_map.height - 1)
    samples = []
    if x1 >= x0 and y1 >= y0:
        sub = depth_map.depth[y0 : y1 + 1, x0 : x1 + 1]
        ys, xs = np.nonzero(sub > 0)
        for yy, xx in zip(ys, xs):
            u = float(x0 + xx)
            v = float(y0 + yy)
            z = float(sub[yy, xx])
            samples.append(
                GroundSample((u - K.cx) / K.f * z, (v - K.cy) / K.f * z, z)
            )
    if not samples:
        raise NoSupportError("no known-depth pixel inside the ground patch")
    return samples


def _samples_to_array(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return as_float_array(samples, "samples", shape=(-1, 3))
    arr = np.array(
        [s.as_array() if isinstance(s, GroundSample) else np.asarray(s, float)
         for s in samples],
        dtype=np.float64,
    ).reshape(-1, 3)
    return as_float_array(arr, "samples", shape=(-1, 3))


def _cramer_normal(c: np.ndarray):
    """Unnormalised (-A, -B, 1)-direction of the best fit c2 = A c0 + B c1.

    c must be centred.  Returns the normal scaled by the 2x2 system
    determinant together with the moment scale used for the degeneracy
    test.
    """
    sxx = float(np.dot(c[:, 0], c[:, 0]))
    syy = float(np.dot(c[:, 1], c[:, 1]))
    sxy = float(np.dot(c[:, 0], c[:, 1]))
    sxz = float(np.dot(c[:, 0], c[:, 2]))
    syz = float(np.dot(c[:, 1], c[:, 2]))
    n = np.array(
        [
            syz * sxy - sxz * syy,
            sxy * sxz - sxx * syz,
            sxx * syy - sxy * sxy,
        ]
    )
    scale = max(sxx, syy, abs(sxz), abs(syz), 1e-30)
    return n, scale


def fit_plane_cramer(samples) -> np.ndarray:
    """Least-squares plane normal via Cramer's rule on centred moments.

    With centred coordinates and second moments S__ = sum over samples,

        n1 = Syz Sxy - Sxz Syy
        n2 = Sxy Sxz - Sxx Syz
        n3 = Sxx Syy - Sxy^2

    which is the (-A, -B, 1) direction of the best-fit z = Ax + By + C
    scaled by the system determinant.  When that regression is
    degenerate, which happens exactly when the plane contains the
    viewing direction of the z axis (a level camera over level ground
    leaves y constant, zeroing every moment above), the same formula is
    applied with the y and z roles swapped, so flat ground still fits.
    The result is normalised and oriented so that the mean of n . p over
    the samples is positive (positive plane offset).  Fewer than three
    samples, or collinear ones, raise DegenerateSamplesError.
    """
    pts = _samples_to_array(samples)
    if pts.shape[0] < 3:
        raise DegenerateSamplesError(
            f"need >= 3 samples for a plane, have {pts.shape[0]}"
        )
    c = pts - pts.mean(axis=0)
    n, scale = _cramer_normal(c)
    if np.linalg.norm(n) < 1e-12 * scale**2:
        n_sw, scale = _cramer_normal(c[:, [0, 2, 1]])
        n = n_sw[[0, 2, 1]]
        if np.linalg.norm(n) < 1e-12 * scale**2:
            raise DegenerateSamplesError("samples do not span a plane")
    n = n / float(np.linalg.norm(n))
    offset = float(pts.mean(axis=0) @ n)
    if offset < 0:
        n = -n
    return n


def estimate_ground(
    detections,
    depth_map: DenseDepthMap,
    K: CameraIntrinsics,
    patch_frac: float = 1.0 / 3.0,
    h_ref: float | None = None,
    min_samples: int = 3,
) -> GroundPlane:
    """Fit the ground plane from patches under all detections.

    Samples from every detection are pooled; detections over unknown
    depth contribute nothing, and if the pool stays empty a
    NoSupportError is raised.  `h_ref` (a barometric height reference)
    rescales the fitted height to the known value, fixing metric scale:
    the returned plane then has h_cam = h_ref and back-projected
    positions scale by h_ref / fitted height.
    """
    pool = []
    for det in detections:
        try:
            pool.extend(patch_samples(det, depth_map, K, patch_frac))
        except NoSupportError:
            continue  # detections over depth holes contribute nothing
    if not pool:
        raise NoSupportError("no detection produced a usable ground sample")
    pts = _samples_to_array(pool)
    if pts.shape[0] < min_samples:
        raise NoSupportError(
            f"only {pts.shape[0]} ground samples, need {min_samples}"
        )
    n = fit_plane_cramer(pts)
    h = float(np.mean(pts @ n))
    if h <= 0:
        raise DegenerateSamplesError("fitted plane has non-positive height")
    if h_ref is not None:
        check_positive(h_ref, "h_ref")
        h = float(h_ref)
    return GroundPlane(n, h)


def backproject_footpoint(pixel, plane: GroundPlane, K: CameraIntrinsics) -> np.ndarray:
    """Intersect a pixel ray with the ground plane.

    c = h_cam * K^-1 b / (n . K^-1 b); requires the ray to point below
    the horizon (n . K^-1 b > 0), otherwise HorizonError is raised.
    The result satisfies n . c = h_cam exactly up to round-off.
    """
    pixel = as_float_array(pixel, "pixel", shape=(2,))
    ray = K.ray(pixel[0], pixel[1])
    denom = float(plane.normal @ ray)
    if denom <= 1e-12:
        raise HorizonError("pixel ray points at or above the horizon")
    return ray * (plane.h_cam / denom)


def object_distance(point) -> float:
    """Euclidean camera-to-object distance of a camera-frame point."""
    p = as_float_array(point, "point", shape=(3,))
    return float(np.linalg.norm(p))


def transform_plane(plane: GroundPlane, xi: Pose) -> GroundPlane:
    """Express a plane in another camera frame, p_new = xi(p_old)."""
    n = xi.rotation @ plane.normal
    h = plane.h_cam + float(n @ xi.translation)
    return GroundPlane(n, h)


def plane_homography(K: CameraIntrinsics, xi: Pose, plane: GroundPlane) -> np.ndarray:
    """Pixel homography induced by the ground plane between two views.

    Maps reference pixels of plane points into the view reached by the
    relative pose `xi` (current-from-reference):
    H = K (R + t n^T / h) K^-1.
    """
    h = K.matrix() @ (
        xi.rotation + np.outer(xi.translation, plane.normal) / plane.h_cam
    ) @ K.inverse_matrix()
    return h


class GroundPlaneEstimator(BaseEstimator):
    """sklearn-style wrapper: fit a plane to samples, project footpoints.

    fit(X) accepts (N, 3) camera-frame ground samples (or GroundSample
    lists) and sets `normal_`, `height_` and `pitch_deg_`; predict(B)
    back-projects (M, 2) footpoint pixels to (M, 3) camera-frame
    positions through the fitted plane.
    """

    def __init__(self, intrinsics=None, patch_frac=1.0 / 3.0, height_ref=None):
        self.intrinsics = intrinsics
        self.patch_frac = patch_frac
        self.height_ref = height_ref

    def fit(self, X, y=None):
        pts = _samples_to_array(X)
        n = fit_plane_cramer(pts)
        h = float(np.mean(pts @ n))
        if h <= 0:
            raise DegenerateSamplesError("fitted plane has non-positive height")
        if self.height_ref is not None:
            h = check_positive(self.height_ref, "height_ref")
        plane = GroundPlane(n, h)
        self.normal_ = plane.normal
        self.height_ = plane.h_cam
        self.pitch_deg_ = plane.pitch_deg
        self.plane_ = plane
        return self

    def fit_detections(self, detections, depth_map):
        """Convenience: pool patch samples under detections, then fit."""
        if self.intrinsics is None:
            raise ValueError("intrinsics must be set to sample detections")
        pool = []
        for det in detections:
            try:
                pool.extend(
                    patch_samples(det, depth_map, self.intrinsics, self.patch_frac)
                )
            except NoSupportError:
                continue
        if not pool:
            raise NoSupportError("no detection produced a usable ground sample")
        return self.fit(pool)

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "plane_"):
            raise NotFittedError("GroundPlaneEstimator is not fitted yet")
        if self.intrinsics is None:
            raise ValueError("intrinsics must be set to back-project pixels")
        pixels = as_float_array(X, "X", shape=(-1, 2))
        return np.array(
            [backproject_footpoint(px, self.plane_, self.intrinsics) for px in pixels]
        ).reshape(-1, 3)
