"""Readers and writers for the on-disk interchange formats.

All text formats are line oriented and written with a fixed '%.9g'
float format so that repeated runs are byte identical.  Parse errors
raise DataError naming the offending line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import IntensityImage, Pose

_FLOAT_FMT = "%.9g"
DEPTH_MAGIC = b"DPTH"


def _fmt(values) -> str:
    return " ".join(_FLOAT_FMT % v for v in values)


# ---------------------------------------------------------------------------
# pose files: one line per frame,
# frame_index r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz

def write_poses(path, poses) -> None:
    lines = []
    for k, pose in enumerate(poses):
        row = list(pose.rotation.reshape(-1)) + list(pose.translation)
        lines.append(f"{k} " + _fmt(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_poses(path) -> list:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 13:
                raise DataError(f"{path}:{lineno}: expected 13 fields, got {len(parts)}")
            try:
                idx = int(parts[0])
                vals = np.array([float(p) for p in parts[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if idx != len(poses):
                raise DataError(f"{path}:{lineno}: frame {idx} out of order")
            r = vals[:9].reshape(3, 3)
            # re-orthonormalise: text round-trip loses a few ulps
            u, _, vt = np.linalg.svd(r)
            try:
                poses.append(Pose(u @ vt, vals[9:]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return poses


# ---------------------------------------------------------------------------
# PGM (P5, 8 bit) grayscale frames, normalised to [0, 1] on read

def write_pgm(path, image: IntensityImage) -> None:
    data = np.round(image.values * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> IntensityImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    # header is three whitespace-separated tokens after the magic
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    need = width * height
    raw = blob[pos : pos + need]
    if len(raw) != need:
        raise DataError(f"{path}: truncated pixel data")
    values = np.frombuffer(raw, dtype=np.uint8).reshape(height, width) / 255.0
    return IntensityImage(values)


# ---------------------------------------------------------------------------
# feature files: frame_index x y d1 .. dN (descriptor length fixed per file)

def write_features(path, features_per_frame) -> None:
    lines = []
    for k, feats in enumerate(features_per_frame):
        for f in feats:
            lines.append(f"{k} " + _fmt([f.x, f.y, *f.descriptor]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_features(path):
    """Returns a dict frame_index -> list of (x, y, descriptor) tuples."""
    out: dict = {}
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4:
                raise DataError(f"{path}:{lineno}: expected at least 4 fields")
            try:
                frame = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            desc = np.array(vals[2:])
            if dim is None:
                dim = desc.size
            elif desc.size != dim:
                raise DataError(f"{path}:{lineno}: descriptor length changed")
            out.setdefault(frame, []).append((vals[0], vals[1], desc))
    return out


# ---------------------------------------------------------------------------
# detection / track CSV:
# frame,id,x,y,w,h,score,class[,e1..eM]; id is -1 for raw detections

@dataclass
class DetectionRow:
    frame: int
    track_id: int
    x: float
    y: float
    w: float
    h: float
    score: float
    label: int = 0
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])


def write_detections(path, rows) -> None:
    lines = []
    for r in rows:
        base = (
            f"{r.frame},{r.track_id},"
            + ",".join(_FLOAT_FMT % v for v in (r.x, r.y, r.w, r.h, r.score))
            + f",{r.label}"
        )
        if r.embedding.size:
            base += "," + ",".join(_FLOAT_FMT % v for v in r.embedding)
        lines.append(base)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path) -> list:
    rows = []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) < 8:
                raise DataError(
                    f"{path}:{lineno}: expected at least 8 comma-separated fields"
                )
            try:
                frame = int(parts[0])
                track_id = int(parts[1])
                x, y, w, h, score = (float(p) for p in parts[2:7])
                label = int(parts[7])
                emb = np.array([float(p) for p in parts[8:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if w <= 0 or h <= 0:
                raise DataError(f"{path}:{lineno}: non-positive box size")
            if dim is None:
                dim = emb.size
            elif emb.size != dim:
                raise DataError(f"{path}:{lineno}: embedding length changed")
            rows.append(
                DetectionRow(frame, track_id, x, y, w, h, score, label, emb)
            )
    return rows


# ---------------------------------------------------------------------------
# localization CSV: frame,track_id,x,y,z,distance_m

def write_localizations(path, rows) -> None:
    lines = ["frame,track_id,x,y,z,distance_m"]
    for frame, track_id, point, dist in rows:
        lines.append(
            f"{frame},{track_id},"
            + ",".join(_FLOAT_FMT % v for v in point)
            + f",{_FLOAT_FMT % dist}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_localizations(path) -> list:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("frame,"):
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields")
            try:
                frame, track_id = int(parts[0]), int(parts[1])
                point = np.array([float(p) for p in parts[2:5]])
                dist = float(parts[5])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            rows.append((frame, track_id, point, dist))
    return rows


# ---------------------------------------------------------------------------
# depth rasters: magic 'DPTH', u32 width, u32 height, then width*height
# float32 depths (0 = unknown) followed by width*height float32 variances;
# all little endian

def write_depth_raster(path, depth: np.ndarray, variance: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    variance = np.asarray(variance, dtype=np.float32)
    if depth.ndim != 2 or depth.shape != variance.shape:
        raise ValueError("depth and variance must be equal-shape 2D arrays")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(depth.astype("<f4").tobytes())
        fh.write(variance.astype("<f4").tobytes())


def read_depth_raster(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DEPTH_MAGIC:
        raise DataError(f"{path}: bad magic, not a depth raster")
    if len(blob) < 12:
        raise DataError(f"{path}: truncated header")
    w, h = struct.unpack("<II", blob[4:12])
    need = 12 + 2 * 4 * w * h
    if len(blob) != need:
        raise DataError(f"{path}: expected {need} bytes, got {len(blob)}")
    flat = np.frombuffer(blob[12:], dtype="<f4")
    depth = flat[: w * h].reshape(h, w).astype(np.float64)
    variance = flat[w * h :].reshape(h, w).astype(np.float64)
    return depth, variance
