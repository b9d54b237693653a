"""Tracking and localization metrics.

CLEAR multi-object tracking metrics (MOTA, FP, FN, identity switches),
identity-F1, mostly-tracked / mostly-lost ratios, localization error
statistics bucketed by true distance, and the three-mode localization
ablation.  Per-frame correspondence uses optimal bipartite assignment
on IOU (greedy association would be an acceptable fallback for very
dense frames, but the optimal solver is exact and fast at these sizes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyReportError, UndefinedMetricsError
from .tracking import Detection, iou

_DEFAULT_BUCKETS = (10.0, 25.0)


def _normalise(tracks_or_rows) -> dict:
    """Anything track-like -> {frame: [(id, box ndarray), ...]}."""
    frames: dict = {}

    def add(frame, tid, box):
        frames.setdefault(int(frame), []).append((int(tid), np.asarray(box, float)))

    for item in tracks_or_rows:
        if hasattr(item, "detections"):  # Track
            for d in item.detections:
                add(d.frame, item.track_id, d.box)
        elif isinstance(item, Detection):
            add(item.frame, getattr(item, "track_id", 0), item.box)
        else:  # DetectionRow or similar
            add(item.frame, item.track_id, (item.x, item.y, item.w, item.h))
    for fr in frames:
        frames[fr].sort(key=lambda p: p[0])
    return frames


@dataclass(frozen=True)
class MotSummary:
    mota: float
    idf1: float
    mostly_tracked: int
    mostly_lost: int
    false_positives: int
    false_negatives: int
    id_switches: int
    n_truth: int
    n_truth_tracks: int


def mot_metrics(hypotheses, truth, iou_threshold: float = 0.5) -> MotSummary:
    """CLEAR metrics plus IDF1 against ground-truth tracks.

    Matching carries the previous frame's pairings forward when they
    still overlap, then assigns the remainder optimally per frame; a
    truth object matched to a different hypothesis than its previous
    one counts as an identity switch.  MOTA = 1 - (FP + FN + IDSW) /
    (number of truth boxes).  IDF1 follows from a single global
    truth-to-hypothesis identity assignment maximising matched frames.
    Empty ground truth raises UndefinedMetricsError.
    """
    hyp = _normalise(hypotheses)
    gt = _normalise(truth)
    n_truth = sum(len(v) for v in gt.values())
    if n_truth == 0:
        raise UndefinedMetricsError("ground truth contains no boxes")

    fp = fn = idsw = 0
    last_match: dict = {}  # truth id -> hyp id it was last matched to
    frames_per_truth: dict = {}
    matched_per_truth: dict = {}
    overlap_counts: dict = {}  # (truth id, hyp id) -> matchable frames

    all_frames = sorted(set(gt) | set(hyp))
    for fr in all_frames:
        g = gt.get(fr, [])
        h = hyp.get(fr, [])
        for tid, _ in g:
            frames_per_truth[tid] = frames_per_truth.get(tid, 0) + 1
        # IDF1 potential matches
        for tid, tbox in g:
            for hid, hbox in h:
                if iou(tbox, hbox) >= iou_threshold:
                    key = (tid, hid)
                    overlap_counts[key] = overlap_counts.get(key, 0) + 1
        matches: dict = {}
        free_g = list(range(len(g)))
        free_h = list(range(len(h)))
        # carry over previous pairings that still overlap
        for gi in list(free_g):
            tid, tbox = g[gi]
            want = last_match.get(tid)
            if want is None:
                continue
            for hi in free_h:
                hid, hbox = h[hi]
                if hid == want and iou(tbox, hbox) >= iou_threshold:
                    matches[gi] = hi
                    free_g.remove(gi)
                    free_h.remove(hi)
                    break
        # optimal assignment for the rest
        if free_g and free_h:
            cost = np.ones((len(free_g), len(free_h)))
            for a, gi in enumerate(free_g):
                for b, hi in enumerate(free_h):
                    ov = iou(g[gi][1], h[hi][1])
                    if ov >= iou_threshold:
                        cost[a, b] = 1.0 - ov
            rows, cols = linear_sum_assignment(cost)
            for a, b in zip(rows, cols):
                if cost[a, b] < 1.0 - iou_threshold + 1e-12:
                    matches[free_g[a]] = free_h[b]
        used_h = set(matches.values())
        for gi, hi in matches.items():
            tid = g[gi][0]
            hid = h[hi][0]
            prev = last_match.get(tid)
            if prev is not None and prev != hid:
                idsw += 1
            last_match[tid] = hid
            matched_per_truth[tid] = matched_per_truth.get(tid, 0) + 1
        fn += len(g) - len(matches)
        fp += len(h) - len(used_h)

    mota = 1.0 - (fp + fn + idsw) / n_truth

    # IDF1: one global identity assignment
    t_ids = sorted(frames_per_truth)
    h_ids = sorted({hid for frs in hyp.values() for hid, _ in frs})
    n_hyp = sum(len(v) for v in hyp.values())
    idtp = 0
    if t_ids and h_ids:
        gain = np.zeros((len(t_ids), len(h_ids)))
        for (tid, hid), cnt in overlap_counts.items():
            gain[t_ids.index(tid), h_ids.index(hid)] = cnt
        rows, cols = linear_sum_assignment(-gain)
        idtp = int(gain[rows, cols].sum())
    idf1 = 2.0 * idtp / (n_truth + n_hyp) if (n_truth + n_hyp) else 0.0

    mt = ml = 0
    for tid, total in frames_per_truth.items():
        ratio = matched_per_truth.get(tid, 0) / total
        if ratio >= 0.8:
            mt += 1
        elif ratio <= 0.2:
            ml += 1
    return MotSummary(
        mota=mota,
        idf1=idf1,
        mostly_tracked=mt,
        mostly_lost=ml,
        false_positives=fp,
        false_negatives=fn,
        id_switches=idsw,
        n_truth=n_truth,
        n_truth_tracks=len(t_ids),
    )


@dataclass(frozen=True)
class BucketStats:
    count: int
    mean: float
    std: float


@dataclass(frozen=True)
class LocalizationReport:
    """Error statistics per true-distance bucket; None marks empty ones."""

    buckets: tuple          # bucket upper edges, e.g. (10.0, 25.0)
    stats: dict             # label -> BucketStats or None
    overall: BucketStats

    def labels(self):
        edges = [f"<={b:g}m" for b in self.buckets]
        return edges + [f">{self.buckets[-1]:g}m"]


def localization_report(
    estimates: dict,
    truth: dict,
    buckets=_DEFAULT_BUCKETS,
) -> LocalizationReport:
    """Euclidean localization errors bucketed by true distance.

    Both inputs map (frame, object id) to camera-frame 3D positions;
    only shared keys are compared.  `buckets` are upper edges in
    metres, with one extra open bucket beyond the last.  Statistics use
    population standard deviation.  No shared keys raises
    EmptyReportError.
    """
    buckets = tuple(float(b) for b in buckets)
    if not buckets or any(b <= 0 for b in buckets) or list(buckets) != sorted(
        set(buckets)
    ):
        raise ValueError("buckets must be increasing positive edges")
    keys = sorted(set(estimates) & set(truth))
    if not keys:
        raise EmptyReportError("no localization estimates match the truth")
    errs: dict = {label: [] for label in
                  [f"<={b:g}m" for b in buckets] + [f">{buckets[-1]:g}m"]}
    all_errs = []
    for key in keys:
        e = np.asarray(estimates[key], dtype=np.float64)
        t = np.asarray(truth[key], dtype=np.float64)
        err = float(np.linalg.norm(e - t))
        dist = float(np.linalg.norm(t))
        label = f">{buckets[-1]:g}m"
        for b in buckets:
            if dist <= b:
                label = f"<={b:g}m"
                break
        errs[label].append(err)
        all_errs.append(err)

    def stats(vals):
        if not vals:
            return None
        arr = np.asarray(vals)
        return BucketStats(len(vals), float(arr.mean()), float(arr.std()))

    return LocalizationReport(
        buckets=buckets,
        stats={label: stats(vals) for label, vals in errs.items()},
        overall=stats(all_errs),
    )


def translation_drift_rate(estimated, truth, fps: float) -> float:
    """Final-position error divided by trajectory duration (m/s)."""
    if len(estimated) != len(truth) or len(estimated) < 2:
        raise ValueError("pose lists must align and contain >= 2 poses")
    if fps <= 0:
        raise ValueError("fps must be positive")
    err = float(
        np.linalg.norm(estimated[-1].translation - truth[-1].translation)
    )
    return err / ((len(truth) - 1) / fps)


# ---------------------------------------------------------------------------
# localization ablation

@dataclass(frozen=True)
class AblationConfig:
    flat_height: float = 10.0
    height_ref: float | None = None
    patch_frac: float = 1.0 / 3.0
    iou_threshold: float = 0.3
    time_window: int = 64
    score_threshold: float = 0.2
    smooth_k: int = 5
    match_iou: float = 0.5
    buckets: tuple = _DEFAULT_BUCKETS


ABLATION_MODES = ("flat", "estimated", "estimated+track")


def _match_to_truth(box, truth_dets, match_iou):
    best, best_ov = None, match_iou
    for obj_id, tbox in truth_dets:
        ov = iou(box, tbox)
        if ov >= best_ov:
            best, best_ov = obj_id, ov
    return best


def ablation_run(truth_scene, detections, config: AblationConfig, modes=ABLATION_MODES):
    """Localization error reports for the three ground-plane modes.

    Modes: "flat" assumes a level plane at `flat_height`; "estimated"
    fits the plane per frame from depth patches under the raw
    detections; "estimated+track" additionally runs the tracker so
    interpolated and smoothed boxes replace the raw ones.  Estimated
    positions are paired with truth objects by box IOU, and each mode
    yields a LocalizationReport against the true 3D footpoints.
    """
    from .ground import backproject_footpoint, estimate_ground, GroundPlane
    from .tracking import track_pipeline

    truth_positions = {}
    truth_boxes = {}
    for fr in range(truth_scene.n_frames):
        for det, obj_id, point in truth_scene.frame_truth(fr):
            truth_positions[(fr, obj_id)] = point
            truth_boxes.setdefault(fr, []).append((obj_id, det.box))

    by_frame: dict = {}
    for row in detections:
        by_frame.setdefault(int(row.frame), []).append(row)

    def footpoints_raw():
        for fr, rows in sorted(by_frame.items()):
            for row in rows:
                box = np.array([row.x, row.y, row.w, row.h])
                yield fr, box, np.array([row.x + row.w / 2.0, row.y + row.h])

    def footpoints_tracked():
        tracks = track_pipeline(
            detections,
            iou_threshold=config.iou_threshold,
            time_window=config.time_window,
            score_threshold=config.score_threshold,
            smooth_k=config.smooth_k,
        )
        for track in tracks:
            for d in track.detections:
                yield d.frame, d.box, d.footpoint

    reports = {}
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode: {mode}")
        estimates = {}
        plane_cache: dict = {}

        def plane_for(fr):
            if fr in plane_cache:
                return plane_cache[fr]
            if mode == "flat":
                plane = GroundPlane.level(config.flat_height)
            else:
                rows = by_frame.get(fr, [])
                depth_map = truth_scene.depth_map(fr)
                try:
                    plane = estimate_ground(
                        [np.array([r.x, r.y, r.w, r.h]) for r in rows],
                        depth_map,
                        truth_scene.intrinsics,
                        patch_frac=config.patch_frac,
                        h_ref=config.height_ref,
                    )
                except Exception:
                    plane = None
            plane_cache[fr] = plane
            return plane

        source = footpoints_tracked() if mode == "estimated+track" else footpoints_raw()
        for fr, box, foot in source:
            if fr >= truth_scene.n_frames:
                continue
            plane = plane_for(fr)
            if plane is None:
                continue
            obj_id = _match_to_truth(box, truth_boxes.get(fr, []), config.match_iou)
            if obj_id is None:
                continue
            try:
                point = backproject_footpoint(foot, plane, truth_scene.intrinsics)
            except Exception:
                continue
            estimates[(fr, obj_id)] = point
        reports[mode] = localization_report(
            estimates, truth_positions, config.buckets
        )
    return reports
