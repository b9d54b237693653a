"""Command-line front end.

Subcommands compose the library stages over files on disk:

  simulate   scene config -> bundle (frames, truth, noisy detections)
  track      detection CSV -> track CSV
  localize   tracks + ground geometry -> localization CSV (+ SVG plot)
  evaluate   tracks/localizations vs truth -> metrics and report tables
  pipeline   all of the above in one run directory

Every run owns its output directory through a lock file, validates
configuration before writing anything, and finishes by atomically
writing a manifest with input/output checksums and stage timings.
Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as dio
from .alignment import initialize_depth_map, select_grid_features, track_sequence
from .depth import run_depth_window
from .errors import (
    ConfigError,
    DataError,
    DroneSightError,
    EmptyReportError,
    HorizonError,
    NoSupportError,
    UndefinedMetricsError,
)
from .ground import (
    GroundPlane,
    backproject_footpoint,
    estimate_ground,
    transform_plane,
)
from .metrics import (
    AblationConfig,
    ablation_run,
    localization_report,
    mot_metrics,
)
from .synth import (
    CorruptionConfig,
    ScenarioTruth,
    build_scene,
    corrupt_detections,
    load_scene_spec,
    spec_from_config,
)
from .tracking import iou, track_pipeline, tracks_to_rows

_LOCK_NAME = ".dronesight.lock"
_MANIFEST_NAME = "manifest.json"

_DEFAULTS = {
    "iou_thresh": 0.3,
    "time_window": 64,
    "score_thresh": 0.2,
    "smooth_k": 5,
    "window": 30,
    "ncc_thresh": 0.85,
    "patch_frac": 1.0 / 3.0,
    "height_ref": None,
    "scale_ref": None,
    "buckets": (10.0, 25.0),
}


# ---------------------------------------------------------------------------
# configuration plumbing

def _load_config(path):
    if path is None:
        return None
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    return cp


def _resolve(args, cp, section, key, cast):
    """CLI flag beats config file beats built-in default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if cp is not None and cp.has_section(section) and key in cp[section]:
        try:
            return cast(cp[section][key])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return _DEFAULTS.get(key)


def _parse_buckets(text) -> tuple:
    try:
        vals = tuple(float(p) for p in str(text).replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"--buckets: {exc}") from exc
    if not vals or any(v <= 0 for v in vals) or list(vals) != sorted(set(vals)):
        raise ConfigError("--buckets needs increasing positive edges")
    return vals


def _corruption_from_config(cp, seed_override=None) -> CorruptionConfig:
    if cp is None or not cp.has_section("corruption"):
        return CorruptionConfig(seed=0 if seed_override is None
                                else seed_override + 1)
    s = cp["corruption"]
    occl = []
    for chunk in s.get("occlusions", "").replace(";", " ").split():
        try:
            obj, span = chunk.split(":")
            first, last = span.split("-")
            occl.append((int(obj), int(first), int(last)))
        except ValueError as exc:
            raise ConfigError(f"[corruption] occlusions entry {chunk!r}: {exc}") \
                from exc
    try:
        cfg = CorruptionConfig(
            box_noise_std=float(s.get("box_noise_std", 0.0)),
            score_range=tuple(
                float(v) for v in s.get("score_range", "0.6 1.0").split()
            ),
            low_score_prob=float(s.get("low_score_prob", 0.0)),
            low_score_range=tuple(
                float(v) for v in s.get("low_score_range", "0.05 0.15").split()
            ),
            miss_prob=float(s.get("miss_prob", 0.0)),
            occlusions=tuple(occl),
            embedding_noise_std=float(s.get("embedding_noise_std", 0.0)),
            clutter_rate=float(s.get("clutter_rate", 0.0)),
            seed=int(s.get("seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError(f"[corruption]: {exc}") from exc
    if seed_override is not None:
        cfg = CorruptionConfig(**{**cfg.__dict__, "seed": seed_override + 1})
    return cfg


def _require_file(path, what):
    if path is None:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# run directory ownership and the manifest

class _Run:
    """Lock the output directory, collect artifacts, emit the manifest."""

    def __init__(self, out, command):
        if out is None:
            raise ConfigError("--out directory is required")
        self.dir = Path(out)
        self.command = command
        self.inputs: dict = {}
        self.outputs: list = []
        self.timings: dict = {}
        self.config_snapshot: dict = {}
        self._lock = self.dir / _LOCK_NAME

    def __enter__(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(
                f"run directory {self.dir} is locked by another run "
                f"(remove {self._lock} if stale)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self._write_manifest()
        finally:
            self._lock.unlink(missing_ok=True)
        return False

    def note_input(self, path):
        p = Path(path)
        self.inputs[str(p)] = _sha256(p)

    def note_output(self, path):
        self.outputs.append(Path(path))

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def stage(self, name):
        return _StageTimer(self, name)

    def _write_manifest(self):
        body = {
            "command": self.command,
            "config": self.config_snapshot,
            "inputs": self.inputs,
            "outputs": {
                str(p.relative_to(self.dir)): _sha256(p)
                for p in sorted(set(self.outputs))
            },
            "timings_s": self.timings,
        }
        tmp = self.dir / (_MANIFEST_NAME + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.dir / _MANIFEST_NAME)


class _StageTimer:
    def __init__(self, run, name):
        self.run, self.name = run, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.run.timings[self.name] = round(time.perf_counter() - self.t0, 6)
        return False


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stages

def _stage_simulate(run: _Run, cp, seed_override):
    spec = spec_from_config(cp)
    if seed_override is not None:
        spec = type(spec)(**{**spec.__dict__, "seed": int(seed_override)})
    corruption = _corruption_from_config(cp, seed_override)
    render = True
    if cp.has_section("camera"):
        render = str(cp["camera"].get("render", "true")).lower() in (
            "1", "true", "yes",
        )
    truth = build_scene(spec)

    with run.stage("simulate"):
        dio.write_poses(run.path("poses.txt"), truth.poses)
        run.note_output(run.path("poses.txt"))
        truth_rows = truth.truth_rows()
        dio.write_detections(run.path("truth.csv"), truth_rows)
        run.note_output(run.path("truth.csv"))
        corrupt_rows = corrupt_detections(truth, corruption)
        dio.write_detections(run.path("detections.csv"), corrupt_rows)
        run.note_output(run.path("detections.csv"))
        meta = {
            "n_frames": truth.n_frames,
            "fps": spec.fps,
            "plane_height": spec.plane_height,
            "pitch_deg": spec.pitch_deg,
            "rendered": bool(render),
            "depth_degenerate": truth.depth_degenerate,
        }
        with open(run.path("scene_meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        run.note_output(run.path("scene_meta.json"))
        with open(run.path("scene.ini"), "w") as fh:
            cp.write(fh)
        run.note_output(run.path("scene.ini"))
        if render:
            for k in range(truth.n_frames):
                p = run.path("frames", f"frame_{k:04d}.pgm")
                dio.write_pgm(p, truth.render_frame(k))
                run.note_output(p)
    print(f"[simulate] {truth.n_frames} frames, {len(corrupt_rows)} detections "
          f"-> {run.dir}")
    return truth, render


def _scene_from_bundle(scene_dir) -> ScenarioTruth:
    ini = _require_file(Path(scene_dir) / "scene.ini", "scene config")
    return build_scene(load_scene_spec(ini))


def _stage_track(run: _Run, rows, params):
    with run.stage("track"):
        tracks = track_pipeline(
            rows,
            iou_threshold=params["iou_thresh"],
            time_window=int(params["time_window"]),
            score_threshold=params["score_thresh"],
            smooth_k=int(params["smooth_k"]),
        )
        out_rows = tracks_to_rows(tracks)
        dio.write_detections(run.path("tracks.csv"), out_rows)
        run.note_output(run.path("tracks.csv"))
    print(f"[track] {len(rows)} detections -> {len(tracks)} tracks")
    return tracks, out_rows


def _stage_odometry(run: _Run, truth: ScenarioTruth, params, seed):
    """Visual odometry over the rendered frames, plus depth rasters."""
    frames = []
    for k in range(truth.n_frames):
        frames.append(dio.read_pgm(run.path("frames", f"frame_{k:04d}.pgm")))
    K = truth.intrinsics

    scale_ref = params.get("scale_ref")
    feats0 = select_grid_features(frames[0])
    if scale_ref is None:
        # anchor monocular scale to the true mean feature depth
        plane0 = truth.plane_in_frame(0)
        zs = []
        for f in feats0:
            ray = K.ray(f.x, f.y)
            denom = float(ray @ plane0.normal)
            if denom > 1e-9:
                zs.append(plane0.h_cam / denom)
        if not zs:
            raise NoSupportError("no ground depth under the initial features")
        scale_ref = float(np.mean(zs))

    h = truth.spec.plane_height
    inv_range = (1.0 / (6.0 * h), 2.0 / h)
    with run.stage("odometry"):
        poses = track_sequence(
            frames,
            K,
            scale_ref=scale_ref,
            seed=seed,
            inv_depth_range=inv_range,
        )
        dio.write_poses(run.path("poses_est.txt"), poses)
        run.note_output(run.path("poses_est.txt"))
        dio.write_features(run.path("features.txt"), [feats0])
        run.note_output(run.path("features.txt"))
    print(f"[odometry] {len(poses)} poses, scale anchor {scale_ref:.3g} m")

    window = int(params["window"])
    depth_maps = {}
    with run.stage("depth"):
        for start in range(0, truth.n_frames, window):
            stop = min(start + window, truth.n_frames)
            if stop - start < 8:
                continue
            feats = select_grid_features(frames[start])
            seeds = initialize_depth_map(
                frames[start], feats, seed=seed + start, inv_depth_range=inv_range
            )
            result = run_depth_window(
                frames[start:stop],
                poses[start:stop],
                seeds,
                K,
                ncc_threshold=params["ncc_thresh"],
            )
            if result.dense is None or not result.dense.known.any():
                continue
            depth_maps[start] = result.dense
            p = run.path("depth", f"depth_{start:04d}.dpth")
            dio.write_depth_raster(p, result.dense.depth, result.dense.variance)
            run.note_output(p)
    print(f"[depth] rasters at keyframes {sorted(depth_maps)}")
    return poses, depth_maps


def _plane_schedule(frames_needed, keyframes):
    """Map each frame to the latest keyframe raster at or before it."""
    out = {}
    for fr in frames_needed:
        prior = [k for k in keyframes if k <= fr]
        out[fr] = max(prior) if prior else (min(keyframes) if keyframes else None)
    return out


def _stage_localize(run: _Run, truth: ScenarioTruth, track_rows, params,
                    poses=None, depth_maps=None, plot=False):
    K = truth.intrinsics
    by_frame: dict = {}
    for r in track_rows:
        by_frame.setdefault(int(r.frame), []).append(r)

    flat = bool(params.get("flat"))
    height_ref = params.get("height_ref")
    if flat and height_ref is None:
        height_ref = truth.spec.plane_height

    use_estimated = depth_maps is not None and len(depth_maps) > 0
    planes: dict = {}
    with run.stage("localize"):
        if flat:
            level = GroundPlane.level(height_ref)
            planes = {fr: level for fr in by_frame}
        elif use_estimated:
            keyframes = sorted(depth_maps)
            schedule = _plane_schedule(sorted(by_frame), keyframes)
            key_planes = {}
            for k in keyframes:
                rows_k = by_frame.get(k, [])
                try:
                    key_planes[k] = estimate_ground(
                        [r.box for r in rows_k],
                        depth_maps[k],
                        K,
                        patch_frac=params["patch_frac"],
                        h_ref=height_ref,
                    )
                except DroneSightError:
                    key_planes[k] = None
            for fr in by_frame:
                k = schedule.get(fr)
                plane_k = None if k is None else key_planes.get(k)
                if plane_k is None:
                    planes[fr] = None
                    continue
                xi = poses[fr].inverse().compose(poses[k])
                planes[fr] = transform_plane(plane_k, xi)
        else:
            # no estimated depth available: fit against true plane depth
            for fr in by_frame:
                try:
                    planes[fr] = estimate_ground(
                        [r.box for r in by_frame[fr]],
                        truth.depth_map(fr),
                        K,
                        patch_frac=params["patch_frac"],
                        h_ref=height_ref,
                    )
                except DroneSightError:
                    planes[fr] = None

        loc_rows = []
        for fr in sorted(by_frame):
            plane = planes.get(fr)
            if plane is None:
                continue
            for r in by_frame[fr]:
                foot = np.array([r.x + r.w / 2.0, r.y + r.h])
                try:
                    c = backproject_footpoint(foot, plane, K)
                except HorizonError:
                    continue
                loc_rows.append((fr, r.track_id, c, float(np.linalg.norm(c))))
        dio.write_localizations(run.path("localizations.csv"), loc_rows)
        run.note_output(run.path("localizations.csv"))
        if plot:
            svg = run.path("top_view.svg")
            write_top_view_svg(svg, loc_rows)
            run.note_output(svg)
    mode = "flat" if flat else ("estimated" if use_estimated else "true-depth fit")
    print(f"[localize] {len(loc_rows)} points ({mode} ground)")
    return loc_rows


def _truth_tables(truth: ScenarioTruth):
    positions = {}
    boxes = {}
    for fr in range(truth.n_frames):
        for det, obj_id, point in truth.frame_truth(fr):
            positions[(fr, obj_id)] = point
            boxes.setdefault(fr, []).append((obj_id, det.box))
    return positions, boxes


def _identity_map(track_rows, truth_boxes, match_iou=0.5):
    """(frame, track id) -> truth object id via best-IOU box pairing."""
    out = {}
    for r in track_rows:
        best, best_ov = None, match_iou
        for obj_id, tbox in truth_boxes.get(int(r.frame), []):
            ov = iou(r.box, tbox)
            if ov >= best_ov:
                best, best_ov = obj_id, ov
        if best is not None:
            out[(int(r.frame), int(r.track_id))] = best
    return out


def _format_report(report) -> str:
    cells = []
    for label in report.labels() + ["overall"]:
        st = report.overall if label == "overall" else report.stats[label]
        cells.append("N/A" if st is None else f"{st.mean:.3f} ({st.std:.3f})")
    return cells


def _stage_evaluate(run: _Run, truth: ScenarioTruth, track_rows, loc_rows,
                    params, detection_rows=None, ablation=False):
    truth_rows = truth.truth_rows()
    buckets = params["buckets"]
    with run.stage("evaluate"):
        summary = mot_metrics(track_rows, truth_rows)
        metrics = {
            "MOTA": summary.mota,
            "IDF1": summary.idf1,
            "MT": summary.mostly_tracked,
            "ML": summary.mostly_lost,
            "FP": summary.false_positives,
            "FN": summary.false_negatives,
            "IDsw": summary.id_switches,
        }
        report_rows = []
        positions, truth_boxes = _truth_tables(truth)
        if loc_rows:
            ident = _identity_map(track_rows, truth_boxes)
            estimates = {}
            for fr, tid, point, _dist in loc_rows:
                obj = ident.get((int(fr), int(tid)))
                if obj is not None:
                    estimates[(int(fr), obj)] = point
            try:
                rep = localization_report(estimates, positions, buckets)
                report_rows.append(("localization", rep))
            except EmptyReportError:
                pass
        if ablation:
            if detection_rows is None:
                raise ConfigError("ablation needs the raw detections file")
            cfg = AblationConfig(
                flat_height=truth.spec.plane_height,
                height_ref=params.get("height_ref"),
                patch_frac=params["patch_frac"],
                iou_threshold=params["iou_thresh"],
                time_window=int(params["time_window"]),
                score_threshold=params["score_thresh"],
                smooth_k=int(params["smooth_k"]),
                buckets=buckets,
            )
            reports = ablation_run(truth, detection_rows, cfg)
            for mode in ("flat", "estimated", "estimated+track"):
                report_rows.append((mode, reports[mode]))

        with open(run.path("metrics.json"), "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        run.note_output(run.path("metrics.json"))

        if report_rows:
            labels = report_rows[0][1].labels() + ["overall"]
            lines_txt = ["mode".ljust(18) + "".join(l.rjust(17) for l in labels)]
            lines_csv = ["mode," + ",".join(
                [f"mean_{l},std_{l},count_{l}" for l in labels]
            )]
            for name, rep in report_rows:
                cells = _format_report(rep)
                lines_txt.append(
                    name.ljust(18) + "".join(c.rjust(17) for c in cells)
                )
                csv_cells = []
                for label in labels:
                    st = rep.overall if label == "overall" else rep.stats[label]
                    if st is None:
                        csv_cells += ["", "", "0"]
                    else:
                        csv_cells += [f"{st.mean:.9g}", f"{st.std:.9g}",
                                      str(st.count)]
                lines_csv.append(name + "," + ",".join(csv_cells))
            with open(run.path("report.txt"), "w") as fh:
                fh.write("\n".join(lines_txt) + "\n")
            run.note_output(run.path("report.txt"))
            with open(run.path("report.csv"), "w") as fh:
                fh.write("\n".join(lines_csv) + "\n")
            run.note_output(run.path("report.csv"))
    print(f"[evaluate] MOTA {summary.mota:.3f} IDF1 {summary.idf1:.3f} "
          f"IDsw {summary.id_switches}")
    return metrics


# ---------------------------------------------------------------------------
# SVG top view

def write_top_view_svg(path, loc_rows, size=640) -> None:
    """Top-down (x, z) plot, one polyline per track id, axes in meters."""
    tracks: dict = {}
    for fr, tid, point, _ in loc_rows:
        tracks.setdefault(int(tid), []).append((fr, float(point[0]),
                                                float(point[2])))
    xs = [p[1] for pts in tracks.values() for p in pts] or [0.0]
    zs = [p[2] for pts in tracks.values() for p in pts] or [0.0]
    x0, x1 = min(xs) - 1.0, max(xs) + 1.0
    z0, z1 = min(zs) - 1.0, max(zs) + 1.0
    span = max(x1 - x0, z1 - z0)
    margin = 50.0
    scale = (size - 2 * margin) / span

    def sx(x):
        return margin + (x - x0) * scale

    def sz(z):
        return size - margin - (z - z0) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" '
        f'y2="{size - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{size - margin}" stroke="black"/>',
        f'<text x="{size / 2:.0f}" y="{size - 12}" text-anchor="middle" '
        f'font-size="14">x [m] ({x0:.1f} to {x0 + span:.1f})</text>',
        f'<text x="14" y="{size / 2:.0f}" text-anchor="middle" '
        f'font-size="14" transform="rotate(-90 14 {size / 2:.0f})">'
        f'z [m] ({z0:.1f} to {z0 + span:.1f})</text>',
    ]
    for idx, tid in enumerate(sorted(tracks)):
        pts = sorted(tracks[tid])
        coords = " ".join(f"{sx(x):.2f},{sz(z):.2f}" for _, x, z in pts)
        hue = (idx * 67) % 360
        parts.append(
            f'<polyline id="track-{tid}" fill="none" '
            f'stroke="hsl({hue},70%,40%)" stroke-width="1.5" '
            f'points="{coords}"/>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# subcommand entry points

def _module_params(args, cp):
    return {
        "iou_thresh": _resolve(args, cp, "tracking", "iou_thresh", float),
        "time_window": _resolve(args, cp, "tracking", "time_window", int),
        "score_thresh": _resolve(args, cp, "tracking", "score_thresh", float),
        "smooth_k": _resolve(args, cp, "tracking", "smooth_k", int),
        "window": _resolve(args, cp, "depth", "window", int),
        "ncc_thresh": _resolve(args, cp, "depth", "ncc_thresh", float),
        "patch_frac": _resolve(args, cp, "ground", "patch_frac", float),
        "height_ref": _resolve(args, cp, "ground", "height_ref", float),
        "scale_ref": _resolve(args, cp, "odometry", "scale_ref", float),
        "flat": bool(getattr(args, "flat", False)),
        "buckets": _bucket_param(args, cp),
    }


def _bucket_param(args, cp):
    val = _resolve(args, cp, "evaluate", "buckets", str)
    if val is None:
        return _DEFAULTS["buckets"]
    return val if isinstance(val, tuple) else _parse_buckets(val)


def cmd_simulate(args) -> int:
    cp = _load_config(args.config)
    if cp is None:
        raise ConfigError("simulate needs --config with a scene description")
    with _Run(args.out, "simulate") as run:
        run.config_snapshot = {s: dict(cp[s]) for s in cp.sections()}
        run.note_input(args.config)
        _stage_simulate(run, cp, args.seed)
    return 0


def cmd_track(args) -> int:
    cp = _load_config(args.config)
    params = _module_params(args, cp)
    det_path = _require_file(args.detections, "detections")
    rows = dio.read_detections(det_path)
    with _Run(args.out, "track") as run:
        run.config_snapshot = {k: params[k] for k in
                               ("iou_thresh", "time_window", "score_thresh",
                                "smooth_k")}
        run.note_input(det_path)
        _stage_track(run, rows, params)
    return 0


def cmd_localize(args) -> int:
    cp = _load_config(args.config)
    params = _module_params(args, cp)
    scene_dir = args.scene or args.out
    truth = _scene_from_bundle(scene_dir)
    tracks_path = _require_file(
        args.tracks or Path(scene_dir) / "tracks.csv", "tracks"
    )
    track_rows = dio.read_detections(tracks_path)
    poses = depth_maps = None
    if args.depth_dir:
        ddir = Path(args.depth_dir)
        if not ddir.is_dir():
            raise DataError(f"depth directory not found: {ddir}")
        depth_maps = {}
        from .depth import DenseDepthMap

        for p in sorted(ddir.glob("depth_*.dpth")):
            k = int(p.stem.split("_")[1])
            depth, variance = dio.read_depth_raster(p)
            depth_maps[k] = DenseDepthMap(depth, variance)
        poses_path = _require_file(
            args.poses or Path(scene_dir) / "poses_est.txt", "poses"
        )
        poses = dio.read_poses(poses_path)
    with _Run(args.out, "localize") as run:
        run.config_snapshot = {
            "patch_frac": params["patch_frac"],
            "height_ref": params["height_ref"],
            "flat": params["flat"],
        }
        run.note_input(tracks_path)
        _stage_localize(run, truth, track_rows, params, poses=poses,
                        depth_maps=depth_maps, plot=args.plot)
    return 0


def cmd_evaluate(args) -> int:
    cp = _load_config(args.config)
    params = _module_params(args, cp)
    scene_dir = args.scene or args.out
    truth = _scene_from_bundle(scene_dir)
    tracks_path = _require_file(
        args.tracks or Path(scene_dir) / "tracks.csv", "tracks"
    )
    track_rows = dio.read_detections(tracks_path)
    loc_rows = []
    loc_path = args.localizations or (Path(scene_dir) / "localizations.csv")
    if Path(loc_path).is_file():
        loc_rows = dio.read_localizations(loc_path)
    detection_rows = None
    if args.ablation:
        det_path = _require_file(
            args.detections or Path(scene_dir) / "detections.csv", "detections"
        )
        detection_rows = dio.read_detections(det_path)
    with _Run(args.out, "evaluate") as run:
        run.config_snapshot = {"buckets": list(params["buckets"])}
        run.note_input(tracks_path)
        _stage_evaluate(run, truth, track_rows, loc_rows, params,
                        detection_rows=detection_rows, ablation=args.ablation)
    return 0


def cmd_pipeline(args) -> int:
    cp = _load_config(args.config)
    if cp is None:
        raise ConfigError("pipeline needs --config with a scene description")
    params = _module_params(args, cp)
    with _Run(args.out, "pipeline") as run:
        run.config_snapshot = {s: dict(cp[s]) for s in cp.sections()}
        run.note_input(args.config)
        truth, rendered = _stage_simulate(run, cp, args.seed)
        det_rows = dio.read_detections(run.path("detections.csv"))
        tracks, track_rows = _stage_track(run, det_rows, params)
        poses = depth_maps = None
        if rendered:
            seed = 0 if args.seed is None else int(args.seed)
            poses, depth_maps = _stage_odometry(run, truth, params, seed + 2)
        loc_rows = _stage_localize(
            run, truth, track_rows, params,
            poses=poses, depth_maps=depth_maps, plot=args.plot,
        )
        _stage_evaluate(run, truth, track_rows, loc_rows, params,
                        detection_rows=det_rows, ablation=args.ablation)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="master RNG seed")
    common.add_argument("--out", help="run output directory")
    common.add_argument("--plot", action="store_true",
                        help="emit SVG top-view plot")

    tracking = argparse.ArgumentParser(add_help=False)
    tracking.add_argument("--iou-thresh", dest="iou_thresh", type=float)
    tracking.add_argument("--time-window", dest="time_window", type=int)
    tracking.add_argument("--score-thresh", dest="score_thresh", type=float)
    tracking.add_argument("--smooth-k", dest="smooth_k", type=int)

    depthp = argparse.ArgumentParser(add_help=False)
    depthp.add_argument("--window", dest="window", type=int)
    depthp.add_argument("--ncc-thresh", dest="ncc_thresh", type=float)
    depthp.add_argument("--scale-ref", dest="scale_ref", type=float)

    groundp = argparse.ArgumentParser(add_help=False)
    groundp.add_argument("--height-ref", dest="height_ref", type=float)
    groundp.add_argument("--patch-frac", dest="patch_frac", type=float)
    groundp.add_argument("--flat", action="store_true",
                         help="assume a level ground plane")

    evalp = argparse.ArgumentParser(add_help=False)
    evalp.add_argument("--buckets", dest="buckets", type=_parse_buckets)

    p = argparse.ArgumentParser(
        prog="dronesight",
        description="drone object tracking and ground-plane 3D localization",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", parents=[common],
                        help="generate a synthetic scene bundle")
    sp.set_defaults(func=cmd_simulate)

    tp = sub.add_parser("track", parents=[common, tracking],
                        help="run the tracker on a detection CSV")
    tp.add_argument("--detections", help="input detection CSV")
    tp.set_defaults(func=cmd_track)

    lp = sub.add_parser("localize", parents=[common, groundp],
                        help="3D-localize tracked boxes on the ground plane")
    lp.add_argument("--scene", help="scene bundle directory")
    lp.add_argument("--tracks", help="track CSV (default <scene>/tracks.csv)")
    lp.add_argument("--depth-dir", help="directory of estimated depth rasters")
    lp.add_argument("--poses", help="estimated pose file for plane transfer")
    lp.set_defaults(func=cmd_localize)

    ep = sub.add_parser("evaluate", parents=[common, tracking, groundp, evalp],
                        help="score tracks and localizations against truth")
    ep.add_argument("--scene", help="scene bundle directory")
    ep.add_argument("--tracks", help="track CSV")
    ep.add_argument("--localizations", help="localization CSV")
    ep.add_argument("--detections", help="raw detection CSV (for --ablation)")
    ep.add_argument("--ablation", action="store_true",
                    help="run the three-mode ground ablation")
    ep.set_defaults(func=cmd_evaluate)

    pp = sub.add_parser(
        "pipeline",
        parents=[common, tracking, depthp, groundp, evalp],
        help="simulate, track, localize and evaluate in one run",
    )
    pp.add_argument("--ablation", action="store_true")
    pp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    except (DataError, UndefinedMetricsError, EmptyReportError,
            FileNotFoundError) as exc:
        print(f"error: [data] {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    except DroneSightError as exc:
        print(f"error: [numerical] {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
