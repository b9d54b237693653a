"""Synthetic aerial scenes with exact ground truth.

A scene is a textured ground plane observed by a camera translating at
constant velocity, plus objects standing on the plane.  Everything is
closed form: camera poses, the plane in any frame, object footpoints,
detection boxes whose bottom-centre pixel is the projected footpoint,
and per-pixel plane depth.  Rendered frames sample a band-limited
texture anchored in plane coordinates, so a correct warp between two
frames is photoconsistent to well under 1e-3 intensity.

`corrupt_detections` turns exact detections into detector-like output:
jittered boxes, score spread with an optional low-confidence
subpopulation, random misses, scripted occlusion intervals, embedding
noise, and uniform clutter boxes.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .depth import DenseDepthMap
from .errors import ConfigError
from .geometry import CameraIntrinsics, IntensityImage, Pose, approximate_intrinsics
from .ground import GroundPlane, transform_plane
from .io import DetectionRow
from .tracking import Detection
from .validation import check_positive

_MIN_OBJECT_DEPTH = 0.25


@dataclass(frozen=True)
class ObjectSpec:
    """An upright object on the plane, moving linearly in plane coords.

    (u0, v0) is its footpoint at frame 0 in plane coordinates (metres,
    u lateral, v away from the camera) and (du, dv) its per-frame
    displacement.  height_m and width_m give physical extent, which the
    scene converts to box size at the object's depth.
    """

    u0: float
    v0: float
    du: float = 0.0
    dv: float = 0.0
    height_m: float = 1.7
    width_m: float = 0.6
    label: int = 0


@dataclass(frozen=True)
class SceneSpec:
    width: int = 640
    height: int = 480
    hfov_deg: float = 90.0
    literal_intrinsics: bool = False
    n_frames: int = 30
    fps: float = 30.0
    velocity: tuple = (0.0, 0.0, 0.0)   # camera velocity, m/s, world frame
    yaw_rate_dps: float = 0.0           # camera yaw about world y, deg/s
    plane_height: float = 10.0          # camera height over plane at frame 0
    pitch_deg: float = 0.0              # plane pitch toward the camera
    texture_seed: int = 7
    texture_amplitude: float = 1.0
    fade_radius: float = 80.0           # texture flattens beyond this radius
    detail_amplitude: float = 0.0       # block-scale texture band, off by default
    detail_freq: float = 3.0            # cycles/m of that band
    objects: tuple = ()
    embedding_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        check_positive(self.width, "width")
        check_positive(self.height, "height")
        check_positive(self.n_frames, "n_frames")
        check_positive(self.fps, "fps")
        check_positive(self.plane_height, "plane_height")
        if abs(self.pitch_deg) >= 80.0:
            raise ValueError("pitch_deg must stay well below 80 degrees")


def _parse_vector(text: str, n: int, name: str):
    parts = text.replace(",", " ").split()
    if len(parts) != n:
        raise ConfigError(f"{name} needs {n} numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def spec_from_config(cp: configparser.ConfigParser) -> SceneSpec:
    """Build a SceneSpec from an INI parser (see docs for the schema).

    Sections: [camera] width/height/hfov_deg/literal, [motion]
    n_frames/fps/velocity, [plane] height/pitch_deg/texture_seed/
    fade_radius/detail_amplitude/detail_freq, [objects]
    count/layout/seed plus any [object.N] sections with
    u0 v0 du dv height_m width_m label.
    """
    try:
        cam = cp["camera"] if cp.has_section("camera") else {}
        mot = cp["motion"] if cp.has_section("motion") else {}
        pl = cp["plane"] if cp.has_section("plane") else {}
        obj = cp["objects"] if cp.has_section("objects") else {}
        spec = SceneSpec(
            width=int(cam.get("width", 640)),
            height=int(cam.get("height", 480)),
            hfov_deg=float(cam.get("hfov_deg", 90.0)),
            literal_intrinsics=str(cam.get("literal", "false")).lower()
            in ("1", "true", "yes"),
            n_frames=int(mot.get("n_frames", 30)),
            fps=float(mot.get("fps", 30.0)),
            velocity=_parse_vector(str(mot.get("velocity", "0 0 0")), 3, "velocity"),
            yaw_rate_dps=float(mot.get("yaw_rate_dps", 0.0)),
            plane_height=float(pl.get("height", 10.0)),
            pitch_deg=float(pl.get("pitch_deg", 0.0)),
            texture_seed=int(pl.get("texture_seed", 7)),
            texture_amplitude=float(pl.get("texture_amplitude", 1.0)),
            fade_radius=float(pl.get("fade_radius", 80.0)),
            detail_amplitude=float(pl.get("detail_amplitude", 0.0)),
            detail_freq=float(pl.get("detail_freq", 3.0)),
            embedding_dim=int(obj.get("embedding_dim", 16)),
            seed=int(obj.get("seed", 0)),
        )
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"bad scene config: {exc}") from exc
    objects = []
    count = int(obj.get("count", 0)) if obj else 0
    if count:
        objects.extend(
            layout_objects(
                count,
                str(obj.get("layout", "spread")),
                seed=int(obj.get("seed", 0)),
                speed=float(obj.get("speed", 0.0)),
            )
        )
    for section in cp.sections():
        if not section.startswith("object."):
            continue
        s = cp[section]
        try:
            objects.append(
                ObjectSpec(
                    u0=float(s["u0"]),
                    v0=float(s["v0"]),
                    du=float(s.get("du", 0.0)),
                    dv=float(s.get("dv", 0.0)),
                    height_m=float(s.get("height_m", 1.7)),
                    width_m=float(s.get("width_m", 0.6)),
                    label=int(s.get("label", 0)),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad [{section}]: {exc}") from exc
    return replace(spec, objects=tuple(objects))


def load_scene_spec(path) -> SceneSpec:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read scene config {path}")
    return spec_from_config(cp)


def layout_objects(count: int, layout: str = "spread", seed: int = 0,
                   speed: float = 0.0):
    """Deterministic object placements for quick scene setup.

    "line" puts static objects abreast at 15 m; "spread" scatters them
    over u in [-6, 6], v in [9, 26] with optional drift up to `speed`
    metres per frame.
    """
    check_positive(count, "count")
    rng = np.random.default_rng(seed)
    out = []
    if layout == "line":
        us = np.linspace(-5.0, 5.0, count)
        for u in us:
            out.append(ObjectSpec(u0=float(u), v0=15.0))
    elif layout == "spread":
        for _ in range(count):
            u0 = float(rng.uniform(-6.0, 6.0))
            v0 = float(rng.uniform(9.0, 26.0))
            du, dv = (float(x) for x in rng.uniform(-speed, speed, 2))
            out.append(ObjectSpec(u0=u0, v0=v0, du=du, dv=dv))
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return out


class _PlaneTexture:
    """Band-limited sinusoid mixture over plane coordinates.

    Amplitudes fall as 1/f^2 so every component contributes equal
    curvature; bilinear resampling error of a rendered frame is then
    ~0.065 * (footprint * 10 / plane_height)^2 intensity units, which
    keeps the photo-consistency of true warps under 1e-3 wherever the
    pixel footprint is below 0.08 * plane_height / 10 meters.  The band
    scales with scene height so low-altitude scenes keep usable
    gradients.  A low-frequency amplitude field breaks periodicity, and
    intensity relaxes to 0.5 beyond fade_radius so the near-horizon
    image is featureless rather than aliased.

    An optional detail band adds a few waves at `detail_freq` cycles/m
    so correlation matching of small pixel blocks has contrast to work
    with; it spends the same resampling-error budget at a rate of
    (a/8)*(2*pi*f*footprint)^2, so scenes that enable it trade warp
    photo-consistency for block matchability and should keep their
    regions of interest at small footprints.
    """

    def __init__(self, seed: int, fade_radius: float, amplitude: float = 1.0,
                 n_waves: int = 8, scale: float = 10.0,
                 detail_amplitude: float = 0.0, detail_freq: float = 3.0):
        rng = np.random.default_rng(seed)
        freqs = np.geomspace(0.1, 0.7, n_waves) * (10.0 / scale)
        amps = 1.0 / (freqs / freqs[0]) ** 2
        amps *= 0.38 * amplitude / amps.sum()
        if detail_amplitude > 0.0:
            dfreqs = detail_freq * np.array([1.0, 1.31, 1.73])
            damps = np.array([1.0, 0.8, 0.6])
            damps *= detail_amplitude / damps.sum()
            freqs = np.concatenate([freqs, dfreqs])
            amps = np.concatenate([amps, damps])
            n_waves += 3
        angles = rng.uniform(0.0, np.pi, n_waves)
        self.kx = 2.0 * np.pi * freqs * np.cos(angles)
        self.kv = 2.0 * np.pi * freqs * np.sin(angles)
        self.phases = rng.uniform(0.0, 2.0 * np.pi, n_waves)
        self.amps = amps
        self.mod_phase = rng.uniform(0.0, 2.0 * np.pi, 2)
        self.fade_radius = float(fade_radius)

    def __call__(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        val = np.zeros(np.broadcast(u, v).shape)
        for a, kx, kv, ph in zip(self.amps, self.kx, self.kv, self.phases):
            val += a * np.sin(kx * u + kv * v + ph)
        mod = 0.8 + 0.2 * np.sin(0.13 * u + self.mod_phase[0]) * np.sin(
            0.11 * v + self.mod_phase[1]
        )
        fade = 1.0 / (1.0 + (np.hypot(u, v) / self.fade_radius) ** 6)
        return 0.5 + val * mod * fade


class ScenarioTruth:
    """Closed-form ground truth for one synthetic scene."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.intrinsics = approximate_intrinsics(
            spec.width, spec.height, spec.hfov_deg, literal=spec.literal_intrinsics
        )
        theta = math.radians(spec.pitch_deg)
        # plane frame: origin at the foot of the camera's frame-0 normal
        self._n_world = np.array([0.0, math.cos(theta), -math.sin(theta)])
        self._e1 = np.array([1.0, 0.0, 0.0])
        self._e2 = np.array([0.0, math.sin(theta), math.cos(theta)])
        self.plane_world = GroundPlane(self._n_world, spec.plane_height)
        step = np.asarray(spec.velocity, dtype=np.float64) / spec.fps
        yaw_step = math.radians(spec.yaw_rate_dps) / spec.fps
        self.poses = []
        for k in range(spec.n_frames):
            phi = yaw_step * k
            c, s = math.cos(phi), math.sin(phi)
            r = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
            self.poses.append(Pose(r, step * k))
        rng = np.random.default_rng(spec.seed)
        self._embeddings = []
        for _ in spec.objects:
            e = rng.normal(size=spec.embedding_dim)
            self._embeddings.append(e / np.linalg.norm(e))
        self._texture = _PlaneTexture(
            spec.texture_seed, spec.fade_radius, spec.texture_amplitude,
            scale=spec.plane_height,
            detail_amplitude=spec.detail_amplitude,
            detail_freq=spec.detail_freq,
        )

    @property
    def n_frames(self) -> int:
        return self.spec.n_frames

    @property
    def depth_degenerate(self) -> bool:
        """True when the camera never translates (no depth baseline)."""
        return bool(np.linalg.norm(self.spec.velocity) < 1e-12)

    def plane_point(self, u, v) -> np.ndarray:
        return (
            self.spec.plane_height * self._n_world
            + np.multiply.outer(np.asarray(u, float), self._e1)
            + np.multiply.outer(np.asarray(v, float), self._e2)
        )

    def plane_in_frame(self, k: int) -> GroundPlane:
        return transform_plane(self.plane_world, self.poses[k].inverse())

    def camera_from_world(self, k: int) -> Pose:
        return self.poses[k].inverse()

    def embedding(self, obj_id: int) -> np.ndarray:
        return self._embeddings[obj_id].copy()

    def object_world(self, k: int, obj_id: int) -> np.ndarray:
        o = self.spec.objects[obj_id]
        return self.plane_point(o.u0 + k * o.du, o.v0 + k * o.dv)

    def frame_truth(self, k: int):
        """Visible objects at frame k as (Detection, obj id, camera point).

        The detection box sits so its bottom-centre pixel is exactly
        the projected footpoint; objects are emitted only when the full
        box lies inside the image and the footpoint is safely in front
        of the camera.
        """
        K = self.intrinsics
        cam = self.camera_from_world(k)
        out = []
        for obj_id, o in enumerate(self.spec.objects):
            p = cam.transform(self.object_world(k, obj_id))
            z = p[2]
            if z <= _MIN_OBJECT_DEPTH:
                continue
            bx = K.f * p[0] / z + K.cx
            by = K.f * p[1] / z + K.cy
            w_px = K.f * o.width_m / z
            h_px = K.f * o.height_m / z
            box = np.array([bx - w_px / 2.0, by - h_px, w_px, h_px])
            if not (
                K.contains(box[0], box[1])
                and K.contains(box[0] + box[2], box[1] + box[3])
            ):
                continue
            det = Detection(
                frame=k,
                box=box,
                score=1.0,
                label=o.label,
                embedding=self._embeddings[obj_id],
            )
            out.append((det, obj_id, p))
        return out

    def truth_rows(self):
        """All visible detections as DetectionRow with true track ids."""
        rows = []
        for k in range(self.n_frames):
            for det, obj_id, _ in self.frame_truth(k):
                rows.append(
                    DetectionRow(
                        frame=k,
                        track_id=obj_id,
                        x=float(det.box[0]),
                        y=float(det.box[1]),
                        w=float(det.box[2]),
                        h=float(det.box[3]),
                        score=1.0,
                        label=det.label,
                        embedding=det.embedding,
                    )
                )
        return rows

    def _plane_depth_grid(self, k: int):
        K = self.intrinsics
        xs = np.arange(K.width, dtype=np.float64)
        ys = np.arange(K.height, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        rays = K.ray(gx, gy)                     # (H, W, 3), z component 1
        plane = self.plane_in_frame(k)
        denom = rays @ plane.normal
        valid = denom > 1e-9
        z = np.zeros_like(denom)
        z[valid] = plane.h_cam / denom[valid]    # ray z = 1, so this is z-depth
        valid &= z > 0
        z[~valid] = 0.0
        return z, valid, rays

    def depth_map(self, k: int, variance: float = 1e-6) -> DenseDepthMap:
        """True plane z-depth per pixel; sky pixels stay unknown."""
        z, valid, _ = self._plane_depth_grid(k)
        var = np.where(valid, variance, 0.0)
        return DenseDepthMap(z, var)

    def render_frame(self, k: int) -> IntensityImage:
        """Plane texture as seen from frame k; sky renders as 0.5."""
        z, valid, rays = self._plane_depth_grid(k)
        pts_cam = rays * z[..., None]
        pose = self.poses[k]
        pts_world = pts_cam @ pose.rotation.T + pose.translation
        rel = pts_world - self.spec.plane_height * self._n_world
        u = rel @ self._e1
        v = rel @ self._e2
        img = np.full(z.shape, 0.5)
        img[valid] = self._texture(u[valid], v[valid])
        return IntensityImage(np.clip(img, 0.0, 1.0))


def build_scene(spec: SceneSpec) -> ScenarioTruth:
    return ScenarioTruth(spec)


@dataclass(frozen=True)
class CorruptionConfig:
    """Detector noise model applied to exact truth rows."""

    box_noise_std: float = 0.0
    score_range: tuple = (0.6, 1.0)
    low_score_prob: float = 0.0
    low_score_range: tuple = (0.05, 0.15)
    miss_prob: float = 0.0
    occlusions: tuple = ()        # (obj_id, first_frame, last_frame) inclusive
    embedding_noise_std: float = 0.0
    clutter_rate: float = 0.0     # expected false boxes per frame
    seed: int = 0


def corrupt_detections(truth: ScenarioTruth, config: CorruptionConfig):
    """Exact detections -> detector-like rows with track_id erased to -1.

    Occlusion intervals remove the object entirely; misses are i.i.d.
    per detection.  Box noise jitters all four box fields, clamping
    size to stay positive.  Clutter boxes are uniform in the image with
    scores from the main range and random unit embeddings.
    """
    rng = np.random.default_rng(config.seed)
    occluded = {}
    for obj_id, first, last in config.occlusions:
        occluded.setdefault(int(obj_id), []).append((int(first), int(last)))
    rows = []
    for k in range(truth.n_frames):
        for det, obj_id, _ in truth.frame_truth(k):
            if any(a <= k <= b for a, b in occluded.get(obj_id, ())):
                continue
            if config.miss_prob > 0 and rng.random() < config.miss_prob:
                continue
            box = det.box + rng.normal(0.0, config.box_noise_std, 4) \
                if config.box_noise_std > 0 else det.box.copy()
            box[2] = max(box[2], 2.0)
            box[3] = max(box[3], 2.0)
            if config.low_score_prob > 0 and rng.random() < config.low_score_prob:
                score = rng.uniform(*config.low_score_range)
            else:
                score = rng.uniform(*config.score_range)
            emb = det.embedding
            if emb.size and config.embedding_noise_std > 0:
                emb = emb + rng.normal(0.0, config.embedding_noise_std, emb.size)
                emb = emb / np.linalg.norm(emb)
            rows.append(
                DetectionRow(
                    frame=k,
                    track_id=-1,
                    x=float(box[0]),
                    y=float(box[1]),
                    w=float(box[2]),
                    h=float(box[3]),
                    score=float(score),
                    label=det.label,
                    embedding=np.asarray(emb, dtype=np.float64),
                )
            )
        if config.clutter_rate > 0:
            for _ in range(rng.poisson(config.clutter_rate)):
                w = rng.uniform(8.0, 40.0)
                h = rng.uniform(12.0, 60.0)
                x = rng.uniform(0.0, truth.intrinsics.width - w)
                y = rng.uniform(0.0, truth.intrinsics.height - h)
                emb = rng.normal(size=truth.spec.embedding_dim)
                emb = emb / np.linalg.norm(emb)
                rows.append(
                    DetectionRow(
                        frame=k,
                        track_id=-1,
                        x=float(x),
                        y=float(y),
                        w=float(w),
                        h=float(h),
                        score=float(rng.uniform(*config.score_range)),
                        label=0,
                        embedding=emb,
                    )
                )
    rows.sort(key=lambda r: (r.frame, r.x, r.y))
    return rows
