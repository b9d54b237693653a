"""Camera model, SE(3) pose algebra and projective geometry primitives.

Conventions used throughout the package: the camera frame has x right,
y down and z along the optical axis; pixel coordinates are (x, y) with
the origin at the centre of the top-left pixel; images are row-major.
"Depth" means the Euclidean distance from the camera centre along the
pixel ray unless a function documents plain z-depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError
from .validation import as_float_array, check_positive

_ORTHONORMAL_ATOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with a single focal length `f` in pixels."""

    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        check_positive(self.f, "f")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.f, 0.0, -self.cx / self.f],
                [0.0, 1.0 / self.f, -self.cy / self.f],
                [0.0, 0.0, 1.0],
            ]
        )

    def ray(self, x, y) -> np.ndarray:
        """Unnormalised viewing ray ((x-cx)/f, (y-cy)/f, 1) for pixel(s)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        rx = (x - self.cx) / self.f
        ry = (y - self.cy) / self.f
        return np.stack([rx, ry, np.ones_like(rx)], axis=-1)

    def contains(self, x, y, margin: float = 0.0):
        """True where (x, y) lies inside the image with the given margin."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return (
            (x >= margin)
            & (x <= self.width - 1 - margin)
            & (y >= margin)
            & (y <= self.height - 1 - margin)
        )


def approximate_intrinsics(
    width: int, height: int, hfov_deg: float = 90.0, literal: bool = False
) -> CameraIntrinsics:
    """Estimate intrinsics for an uncalibrated camera from its field of view.

    The default mode uses the geometric pinhole relation
    f = (w / 2) / tan(hfov / 2) and the image centre as principal point.
    `literal=True` instead evaluates f = (w / 2) * arctan(hfov_rad / 2),
    a published approximation kept for compatibility with runs that were
    calibrated against it; both agree at 90 degrees only in order of
    magnitude, so the mode is part of the camera configuration.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    if not 0.0 < hfov_deg < 180.0:
        raise ValueError(f"hfov_deg must lie in (0, 180), got {hfov_deg}")
    half = math.radians(hfov_deg) / 2.0
    if literal:
        f = (width / 2.0) * math.atan(half)
    else:
        f = (width / 2.0) / math.tan(half)
    return CameraIntrinsics(
        f=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height
    )


def _check_rotation(r: np.ndarray):
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > _ORTHONORMAL_ATOL:
        raise ValueError(f"rotation is not orthonormal (|R'R - I| = {err:.2e})")
    if np.linalg.det(r) < 0:
        raise ValueError("rotation has negative determinant")


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform p' = R p + t between two camera/world frames."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = as_float_array(self.rotation, "rotation", shape=(3, 3))
        t = as_float_array(self.translation, "translation", shape=(3,))
        _check_rotation(r)
        r = r.copy()
        t = t.copy()
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def exp(cls, xi) -> "Pose":
        """Exponential map of a twist [vx, vy, vz, wx, wy, wz]."""
        xi = as_float_array(xi, "xi", shape=(6,))
        v, w = xi[:3], xi[3:]
        theta = float(np.linalg.norm(w))
        k = _hat(w)
        k2 = k @ k
        if theta < 1e-9:
            # second-order series keeps exp/compose accurate near identity
            r = np.eye(3) + k + 0.5 * k2
            vmat = np.eye(3) + 0.5 * k + k2 / 6.0
        else:
            a = math.sin(theta) / theta
            b = (1.0 - math.cos(theta)) / theta**2
            c = (theta - math.sin(theta)) / theta**3
            r = np.eye(3) + a * k + b * k2
            vmat = np.eye(3) + b * k + c * k2
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        return cls(r, vmat @ v)

    def compose(self, other: "Pose") -> "Pose":
        """Transform applying `other` first, then `self`."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points) -> np.ndarray:
        """Apply to one (3,) point or an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


def rotation_angle_deg(a: Pose, b: Pose) -> float:
    """Geodesic angle between the rotations of two poses, in degrees."""
    r = a.rotation.T @ b.rotation
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True, eq=False)
class IntensityImage:
    """Grayscale image with float64 intensities in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = as_float_array(self.values, "values", ndim=2)
        if v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError("image must be at least 2x2")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def contains(self, x, y, margin: float = 0.0):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return (
            (x >= margin)
            & (x <= self.width - 1 - margin)
            & (y >= margin)
            & (y <= self.height - 1 - margin)
        )

    def _cells(self, x, y):
        x = np.clip(np.asarray(x, dtype=np.float64), 0.0, self.width - 1.0)
        y = np.clip(np.asarray(y, dtype=np.float64), 0.0, self.height - 1.0)
        x0 = np.clip(np.floor(x).astype(np.int64), 0, self.width - 2)
        y0 = np.clip(np.floor(y).astype(np.int64), 0, self.height - 2)
        return x - x0, y - y0, x0, y0

    def sample(self, x, y):
        """Bilinear interpolation; coordinates are clamped to the domain."""
        fx, fy, x0, y0 = self._cells(x, y)
        v = self.values
        top = (1.0 - fx) * v[y0, x0] + fx * v[y0, x0 + 1]
        bot = (1.0 - fx) * v[y0 + 1, x0] + fx * v[y0 + 1, x0 + 1]
        out = (1.0 - fy) * top + fy * bot
        return float(out) if out.ndim == 0 else out

    def sample_with_gradient(self, x, y):
        """Value plus the exact gradient of the bilinear interpolant.

        The gradient is the in-cell derivative, so it matches central
        finite differences away from cell boundaries to round-off.
        """
        fx, fy, x0, y0 = self._cells(x, y)
        v = self.values
        v00, v01 = v[y0, x0], v[y0, x0 + 1]
        v10, v11 = v[y0 + 1, x0], v[y0 + 1, x0 + 1]
        val = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
        gx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        gy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        return val, gx, gy

    def block(self, center, half_size: int) -> "PixelBlock":
        """Extract a (2*half_size+1)^2 block by bilinear sampling."""
        center = as_float_array(center, "center", shape=(2,))
        if not bool(self.contains(center[0], center[1], margin=half_size)):
            raise ValueError("block extends outside the image")
        off = np.arange(-half_size, half_size + 1, dtype=np.float64)
        ox, oy = np.meshgrid(off, off)
        vals = self.sample(center[0] + ox, center[1] + oy)
        return PixelBlock(center=(float(center[0]), float(center[1])),
                          half_size=half_size, intensities=vals)


@dataclass(frozen=True, eq=False)
class PixelBlock:
    """Square grid of intensities centred on a (sub-)pixel location."""

    center: tuple
    half_size: int
    intensities: np.ndarray

    def __post_init__(self):
        if self.half_size < 0:
            raise ValueError("half_size must be >= 0")
        side = 2 * self.half_size + 1
        v = as_float_array(self.intensities, "intensities", shape=(side, side))
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "intensities", v)


def huber_norm(residual, delta: float):
    """Huber penalty: r^2/2 below `delta`, linear with slope delta above.

    Continuous with a continuous first derivative; accepts scalars or
    arrays and applies elementwise.
    """
    check_positive(delta, "delta")
    r = np.abs(np.asarray(residual, dtype=np.float64))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def project(K: CameraIntrinsics, pose: Pose, point) -> np.ndarray:
    """Project world point(s) through `pose` (world-to-camera) onto pixels."""
    p = np.asarray(point, dtype=np.float64)
    q = pose.transform(p)
    z = q[..., 2]
    if np.any(z <= 0.0):
        raise BehindCameraError(f"point behind camera (z = {np.min(z):.6g})")
    x = K.f * q[..., 0] / z + K.cx
    y = K.f * q[..., 1] / z + K.cy
    return np.stack([x, y], axis=-1)


def backproject(K: CameraIntrinsics, pixel, z_depth) -> np.ndarray:
    """Camera-frame point of pixel(s) at the given z-depth."""
    pixel = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(z_depth, dtype=np.float64)
    if np.any(z <= 0.0):
        raise ValueError("z_depth must be positive")
    return K.ray(pixel[..., 0], pixel[..., 1]) * z[..., None]


def warp(pixel, inverse_depth, xi: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Map reference pixel(s) into another view.

    Back-projects at z-depth 1/inverse_depth, applies the relative pose
    `xi` (current-from-reference) and projects again.  Raises
    BehindCameraError when the transformed point has non-positive depth.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    inv_d = np.asarray(inverse_depth, dtype=np.float64)
    if np.any(inv_d <= 0.0):
        raise ValueError("inverse_depth must be positive")
    p = K.ray(pixel[..., 0], pixel[..., 1]) / inv_d[..., None]
    return project(K, xi, p)


def triangulate(
    pose_ref: Pose,
    pose_cur: Pose,
    x_ref,
    x_cur,
    K: CameraIntrinsics,
    min_angle_deg: float = 0.5,
) -> float:
    """Midpoint triangulation; returns depth along the reference ray.

    Poses are world-from-camera.  The returned depth is the Euclidean
    distance from the reference camera centre to the midpoint of the
    closest approach of the two rays, exact for noiseless rays.  Rays
    closer than `min_angle_deg` to parallel, or a zero baseline, raise
    DegenerateGeometryError.
    """
    x_ref = as_float_array(x_ref, "x_ref", shape=(2,))
    x_cur = as_float_array(x_cur, "x_cur", shape=(2,))
    c0 = pose_ref.translation
    c1 = pose_cur.translation
    baseline = c1 - c0
    if np.linalg.norm(baseline) < 1e-12:
        raise DegenerateGeometryError("zero baseline between views")
    d0 = pose_ref.rotation @ K.ray(x_ref[0], x_ref[1])
    d1 = pose_cur.rotation @ K.ray(x_cur[0], x_cur[1])
    d0 = d0 / np.linalg.norm(d0)
    d1 = d1 / np.linalg.norm(d1)
    cos_ang = float(np.clip(np.dot(d0, d1), -1.0, 1.0))
    if math.degrees(math.acos(cos_ang)) < min_angle_deg:
        raise DegenerateGeometryError(
            f"rays are near parallel (< {min_angle_deg} deg)"
        )
    # closest points: s along d0, u along d1
    b = cos_ang
    d = float(np.dot(d0, baseline))
    e = float(np.dot(d1, baseline))
    denom = 1.0 - b * b
    s = (d - b * e) / denom
    u = (b * d - e) / denom
    if s <= 0.0 or u <= 0.0:
        raise BehindCameraError("triangulated point lies behind a camera")
    mid = 0.5 * (c0 + s * d0 + c1 + u * d1)
    return float(np.linalg.norm(mid - c0))


@dataclass(frozen=True, eq=False)
class EpipolarSegment:
    """Image-plane segment between the projections of two ray points."""

    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        s = as_float_array(self.start, "start", shape=(2,))
        e = as_float_array(self.end, "end", shape=(2,))
        s.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    def point_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.start + t[..., None] * (self.end - self.start)


def epipolar_line(
    K: CameraIntrinsics, xi: Pose, x_ref, d_min: float, d_max: float
) -> EpipolarSegment:
    """Project the reference-pixel ray over a z-depth interval.

    Every warp of `x_ref` at a depth inside [d_min, d_max] lies on the
    returned segment.  A zero-baseline `xi` collapses the segment to a
    point and raises DegenerateGeometryError; an interval crossing the
    camera plane of the second view raises BehindCameraError.
    """
    x_ref = as_float_array(x_ref, "x_ref", shape=(2,))
    if not 0.0 < d_min < d_max:
        raise ValueError("need 0 < d_min < d_max")
    if np.linalg.norm(xi.translation) < 1e-12:
        raise DegenerateGeometryError("zero baseline: epipolar segment degenerates")
    ray = K.ray(x_ref[0], x_ref[1])
    rz = float((xi.rotation @ ray)[2])
    tz = float(xi.translation[2])
    # pole of the projective depth parameterisation must not sit inside
    if abs(rz) > 1e-15:
        z_pole = -tz / rz
        if d_min < z_pole < d_max:
            raise BehindCameraError("ray crosses the camera plane inside interval")
    p0 = warp(x_ref, 1.0 / d_min, xi, K)
    p1 = warp(x_ref, 1.0 / d_max, xi, K)
    return EpipolarSegment(start=p0, end=p1)
