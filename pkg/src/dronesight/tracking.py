"""Tracklet-graph multi-object tracking.

Detections are first linked frame to frame into short, safe tracklets
(motion-compensated IOU gating plus mutually-best appearance), the
tracklets become vertices of a graph whose edge weights estimate the
likelihood that two tracklets belong to one object, and greedy
agglomerative clustering with a cost guard merges them into tracks.
Track gaps are linearly interpolated and unreliable boxes smoothed with
a sliding-window mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .errors import InvalidPairError
from .validation import as_float_array, check_in_range

_LIKELIHOOD_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class Detection:
    """One detector output: frame index, (x, y, w, h) box, score."""

    frame: int
    box: np.ndarray
    score: float = 1.0
    label: int = 0
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(0))
    interpolated: bool = False

    def __post_init__(self):
        b = as_float_array(self.box, "box", shape=(4,))
        if b[2] <= 0 or b[3] <= 0:
            raise ValueError("box must have positive width and height")
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "box", b)
        e = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        e.setflags(write=False)
        object.__setattr__(self, "embedding", e)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.box[0] + self.box[2] / 2.0,
                         self.box[1] + self.box[3] / 2.0])

    @property
    def footpoint(self) -> np.ndarray:
        """Bottom-centre pixel of the box."""
        return np.array([self.box[0] + self.box[2] / 2.0,
                         self.box[1] + self.box[3]])


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    a = as_float_array(box_a, "box_a", shape=(4,))
    b = as_float_array(box_b, "box_b", shape=(4,))
    x0 = max(a[0], b[0])
    y0 = max(a[1], b[1])
    x1 = min(a[0] + a[2], b[0] + b[2])
    y1 = min(a[1] + a[3], b[1] + b[3])
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    union = a[2] * a[3] + b[2] * b[3] - inter
    return float(inter / union) if union > 0 else 0.0


def warp_box(box, homography) -> np.ndarray:
    """Axis-aligned bound of a box warped by a 3x3 pixel homography."""
    b = as_float_array(box, "box", shape=(4,))
    h = as_float_array(homography, "homography", shape=(3, 3))
    corners = np.array(
        [
            [b[0], b[1], 1.0],
            [b[0] + b[2], b[1], 1.0],
            [b[0], b[1] + b[3], 1.0],
            [b[0] + b[2], b[1] + b[3], 1.0],
        ]
    )
    warped = corners @ h.T
    w = warped[:, :2] / warped[:, 2:3]
    x0, y0 = w.min(axis=0)
    x1, y1 = w.max(axis=0)
    return np.array([x0, y0, max(x1 - x0, 1e-9), max(y1 - y0, 1e-9)])


@dataclass(eq=False)
class Tracklet:
    """Temporally contiguous run of detections believed to be one object."""

    tracklet_id: int
    detections: list

    def __post_init__(self):
        if not self.detections:
            raise ValueError("tracklet needs at least one detection")
        frames = [d.frame for d in self.detections]
        if any(b - a != 1 for a, b in zip(frames, frames[1:])):
            raise ValueError("tracklet frames must be contiguous")

    @property
    def start(self) -> int:
        return self.detections[0].frame

    @property
    def end(self) -> int:
        return self.detections[-1].frame

    def __len__(self) -> int:
        return len(self.detections)

    def mean_embedding(self):
        embs = [d.embedding for d in self.detections if d.embedding.size]
        if not embs:
            return None
        m = np.mean(embs, axis=0)
        n = np.linalg.norm(m)
        return m / n if n > 0 else m

    def velocity(self, n_last: int = 5) -> np.ndarray:
        """Least-squares centre velocity (px/frame) over the last boxes."""
        dets = self.detections[-n_last:]
        if len(dets) < 2:
            return np.zeros(2)
        t = np.array([d.frame for d in dets], dtype=np.float64)
        c = np.array([d.center for d in dets])
        t = t - t.mean()
        denom = float(np.dot(t, t))
        if denom == 0:
            return np.zeros(2)
        return (t @ (c - c.mean(axis=0))) / denom


@dataclass(eq=False)
class Track:
    """Final track: detections with increasing frames, gaps filled."""

    track_id: int
    detections: list
    smoothed_frames: tuple = ()
    skipped_frames: tuple = ()

    def __post_init__(self):
        frames = [d.frame for d in self.detections]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("track frames must be strictly increasing")

    @property
    def frames(self) -> list:
        return [d.frame for d in self.detections]

    def __len__(self) -> int:
        return len(self.detections)


def _to_detection(obj) -> Detection:
    if isinstance(obj, Detection):
        return obj
    return Detection(
        frame=int(obj.frame),
        box=np.array([obj.x, obj.y, obj.w, obj.h]),
        score=float(obj.score),
        label=int(getattr(obj, "label", 0)),
        embedding=np.asarray(getattr(obj, "embedding", np.zeros(0))),
    )


def _by_frame(detections) -> dict:
    frames: dict = {}
    for d in detections:
        frames.setdefault(int(d.frame), []).append(d)
    return dict(sorted(frames.items()))


def _motion_for(motion, frame: int):
    if motion is None:
        return None
    if callable(motion):
        return motion(frame)
    try:
        return motion[frame]
    except (KeyError, IndexError):
        return None


def generate_tracklets(detections, motion=None, iou_threshold: float = 0.3) -> list:
    """Link detections frame to frame into contiguous tracklets.

    `motion` optionally supplies a per-frame 3x3 homography (indexable
    by frame or callable) mapping pixels of frame t into frame t+1;
    boxes are warped by it before the IOU gate, which compensates
    camera motion.  Pairs above `iou_threshold` are linked when they
    are mutually the best match under appearance similarity (cosine of
    embeddings when present, IOU otherwise).  Each detection joins at
    most one tracklet.
    """
    check_in_range(iou_threshold, "iou_threshold", 0.0, 1.0)
    dets = [_to_detection(d) for d in detections]
    frames = _by_frame(dets)
    if not frames:
        return []
    tracklets: list[Tracklet] = []
    open_tracklets: dict[int, list] = {}  # tracklet index -> detections
    next_id = 0
    frame_ids = sorted(frames)
    prev_frame = None
    prev_members: list[tuple[int, Detection]] = []  # (tracklet idx, det)

    for fr in frame_ids:
        cur = frames[fr]
        assigned = [False] * len(cur)
        if prev_frame is not None and fr == prev_frame + 1 and prev_members:
            h = _motion_for(motion, prev_frame)
            prev_boxes = []
            for _, det in prev_members:
                prev_boxes.append(det.box if h is None else warp_box(det.box, h))
            overlap = np.zeros((len(prev_members), len(cur)))
            for i, pb in enumerate(prev_boxes):
                for j, det in enumerate(cur):
                    overlap[i, j] = iou(pb, det.box)
            sim = overlap.copy()
            for i, (_, pdet) in enumerate(prev_members):
                for j, det in enumerate(cur):
                    if pdet.embedding.size and det.embedding.size:
                        na = np.linalg.norm(pdet.embedding)
                        nb = np.linalg.norm(det.embedding)
                        if na > 0 and nb > 0:
                            sim[i, j] = float(
                                pdet.embedding @ det.embedding / (na * nb)
                            )
            eligible = overlap > iou_threshold
            sim_masked = np.where(eligible, sim, -np.inf)
            for i in range(len(prev_members)):
                if not np.any(eligible[i]):
                    continue
                j = int(np.argmax(sim_masked[i]))
                if int(np.argmax(sim_masked[:, j])) == i and not assigned[j]:
                    t_idx = prev_members[i][0]
                    open_tracklets[t_idx].append(cur[j])
                    assigned[j] = True
        # unmatched current detections start fresh tracklets
        new_members = []
        for j, det in enumerate(cur):
            if assigned[j]:
                continue
            open_tracklets[next_id] = [det]
            new_members.append((next_id, det))
            next_id += 1
        prev_members = [
            (idx, open_tracklets[idx][-1])
            for idx, dets_ in open_tracklets.items()
            if dets_[-1].frame == fr
        ]
        prev_frame = fr

    for idx in sorted(open_tracklets):
        tracklets.append(Tracklet(idx, open_tracklets[idx]))
    return tracklets


def connectivity(
    a: Tracklet,
    b: Tracklet,
    time_window: int = 64,
    weights=(0.5, 0.4, 0.1),
    motion_scale: float = 0.5,
) -> float:
    """Likelihood in [0, 1] that tracklet `b` continues tracklet `a`.

    Requires a.end < b.start (overlap raises InvalidPairError); a gap
    larger than `time_window` scores 0 by contract.  The score is the
    weighted sum of an appearance term (cosine similarity of mean
    embeddings clipped to [0, 1]; 0.5 when embeddings are absent), a
    motion term (Gaussian kernel on the constant-velocity extrapolation
    residual, normalised by box size) and a gap term decaying with the
    gap length.
    """
    if a.end >= b.start:
        raise InvalidPairError(
            f"tracklets overlap in time ({a.end} >= {b.start})"
        )
    if len(weights) != 3 or any(w < 0 for w in weights):
        raise ValueError("weights must be three non-negative numbers")
    gap = b.start - a.end
    if gap > time_window:
        return 0.0

    ea, eb = a.mean_embedding(), b.mean_embedding()
    if ea is None or eb is None:
        appearance = 0.5
    else:
        appearance = float(np.clip(ea @ eb, 0.0, 1.0))

    vel = a.velocity()
    last = a.detections[-1]
    first = b.detections[0]
    predicted = last.center + vel * gap
    scale = 0.5 * (
        (last.box[2] + last.box[3]) / 2.0 + (first.box[2] + first.box[3]) / 2.0
    )
    resid = float(np.linalg.norm(predicted - first.center)) / max(scale, 1e-9)
    motion = math.exp(-0.5 * (resid / motion_scale) ** 2)

    gap_term = math.exp(-(gap - 1) / max(time_window / 4.0, 1.0))

    w_app, w_mot, w_gap = weights
    return float(w_app * appearance + w_mot * motion + w_gap * gap_term)


@dataclass(eq=False)
class TrackGraph:
    """Tracklet vertices plus connectivity-weighted directed edges."""

    tracklets: list
    edges: dict  # (i, j) index pair, a before b -> likelihood


def build_graph(
    tracklets,
    time_window: int = 64,
    weights=(0.5, 0.4, 0.1),
) -> TrackGraph:
    """Score every temporally ordered tracklet pair within the window."""
    tracklets = list(tracklets)
    edges = {}
    for i, a in enumerate(tracklets):
        for j, b in enumerate(tracklets):
            if i == j or a.end >= b.start:
                continue
            like = connectivity(a, b, time_window, weights)
            if like > 0.0:
                edges[(i, j)] = like
    return TrackGraph(tracklets, edges)


def _interpolate_gap(prev: Detection, nxt: Detection) -> list:
    out = []
    span = nxt.frame - prev.frame
    for fr in range(prev.frame + 1, nxt.frame):
        t = (fr - prev.frame) / span
        box = (1 - t) * prev.box + t * nxt.box
        score = (1 - t) * prev.score + t * nxt.score
        out.append(
            Detection(frame=fr, box=box, score=float(score), label=prev.label,
                      interpolated=True)
        )
    return out


def cluster_graph(graph: TrackGraph, merge_threshold: float = 0.5) -> list:
    """Greedy agglomerative clustering of the tracklet graph.

    Edges are visited in descending likelihood; an edge merges its two
    clusters when the likelihood exceeds `merge_threshold`, the merged
    cluster stays temporally disjoint, and the total assignment cost
    (-log l over intra-cluster edges, -log(1-l) over cut edges) does
    not increase.  Passes repeat until stable, so the result is a fixed
    point with no admissible merge left.  Each cluster becomes a Track,
    with gaps between tracklets interpolated linearly.
    """
    check_in_range(merge_threshold, "merge_threshold", 0.0, 1.0)
    tracklets = graph.tracklets
    cluster_of = list(range(len(tracklets)))
    members: dict[int, list] = {i: [i] for i in range(len(tracklets))}

    spans = [(t.start, t.end) for t in tracklets]

    def disjoint(ca: int, cb: int) -> bool:
        for i in members[ca]:
            for j in members[cb]:
                if not (spans[i][1] < spans[j][0] or spans[j][1] < spans[i][0]):
                    return False
        return True

    def merge_cost_delta(ca: int, cb: int) -> float:
        delta = 0.0
        for i in members[ca]:
            for j in members[cb]:
                for key in ((i, j), (j, i)):
                    like = graph.edges.get(key)
                    if like is None:
                        continue
                    l = min(max(like, _LIKELIHOOD_EPS), 1.0 - _LIKELIHOOD_EPS)
                    delta += -math.log(l) + math.log(1.0 - l)
        return delta

    order = sorted(graph.edges.items(), key=lambda kv: (-kv[1], kv[0]))
    changed = True
    while changed:
        changed = False
        for (i, j), like in order:
            if like <= merge_threshold:
                continue
            ca, cb = cluster_of[i], cluster_of[j]
            if ca == cb:
                continue
            if not disjoint(ca, cb):
                continue
            if merge_cost_delta(ca, cb) > 1e-12:
                continue
            members[ca].extend(members[cb])
            for m in members[cb]:
                cluster_of[m] = ca
            del members[cb]
            changed = True

    clusters = sorted(
        members.values(), key=lambda ms: (min(spans[m][0] for m in ms), min(ms))
    )
    tracks = []
    for tid, ms in enumerate(clusters, start=1):
        parts = sorted((tracklets[m] for m in ms), key=lambda t: t.start)
        dets: list[Detection] = []
        for part in parts:
            if dets:
                dets.extend(_interpolate_gap(dets[-1], part.detections[0]))
            dets.extend(part.detections)
        tracks.append(Track(tid, dets))
    return tracks


def smooth_box(track: Track, score_threshold: float = 0.2, k: int = 5) -> Track:
    """Sliding-window mean smoothing of unreliable boxes.

    For each corner coordinate the smoothed state follows

        s_t = s_{t-1} + (x_t - x_{t-k}) / k

    i.e. the mean of the last k raw values; frames whose score is below
    `score_threshold` are replaced by the state, all others pass
    through.  Low-score frames without k frames of history pass through
    and are reported in `skipped_frames`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    check_in_range(score_threshold, "score_threshold", 0.0, 1.0)
    corners = np.array(
        [
            [d.box[0], d.box[1], d.box[0] + d.box[2], d.box[1] + d.box[3]]
            for d in track.detections
        ]
    )
    out = []
    smoothed = []
    skipped = []
    for i, det in enumerate(track.detections):
        if det.score >= score_threshold:
            out.append(det)
            continue
        if i < k - 1:
            out.append(det)
            skipped.append(det.frame)
            continue
        s = corners[i - k + 1 : i + 1].mean(axis=0)
        box = np.array([s[0], s[1], s[2] - s[0], s[3] - s[1]])
        out.append(replace(det, box=box))
        smoothed.append(det.frame)
    return Track(track.track_id, out, tuple(smoothed), tuple(skipped))


def track_pipeline(
    detections,
    motion=None,
    iou_threshold: float = 0.3,
    time_window: int = 64,
    score_threshold: float = 0.2,
    smooth_k: int = 5,
    merge_threshold: float = 0.5,
    weights=(0.5, 0.4, 0.1),
) -> list:
    """Detections in, smoothed identity-consistent tracks out."""
    tracklets = generate_tracklets(detections, motion, iou_threshold)
    if not tracklets:
        return []
    graph = build_graph(tracklets, time_window, weights)
    tracks = cluster_graph(graph, merge_threshold)
    return [smooth_box(t, score_threshold, smooth_k) for t in tracks]


def tracks_to_rows(tracks) -> list:
    """Flatten tracks to (frame, id, x, y, w, h, score, label) rows."""
    from .io import DetectionRow

    rows = []
    for track in tracks:
        for d in track.detections:
            rows.append(
                DetectionRow(
                    frame=d.frame,
                    track_id=track.track_id,
                    x=float(d.box[0]),
                    y=float(d.box[1]),
                    w=float(d.box[2]),
                    h=float(d.box[3]),
                    score=float(d.score),
                    label=d.label,
                )
            )
    rows.sort(key=lambda r: (r.frame, r.track_id))
    return rows


class TrackletGraphTracker(BaseEstimator):
    """Estimator wrapper around `track_pipeline`.

    fit(X, motion=None) consumes detections (Detection objects or CSV
    rows) and exposes the resulting tracks as `tracks_`; `fit_predict`
    returns them directly, mirroring clustering estimators.
    """

    def __init__(
        self,
        iou_threshold=0.3,
        time_window=64,
        score_threshold=0.2,
        smooth_k=5,
        merge_threshold=0.5,
        weights=(0.5, 0.4, 0.1),
    ):
        self.iou_threshold = iou_threshold
        self.time_window = time_window
        self.score_threshold = score_threshold
        self.smooth_k = smooth_k
        self.merge_threshold = merge_threshold
        self.weights = weights

    def fit(self, X, y=None, motion=None):
        self.tracks_ = track_pipeline(
            X,
            motion=motion,
            iou_threshold=self.iou_threshold,
            time_window=self.time_window,
            score_threshold=self.score_threshold,
            smooth_k=self.smooth_k,
            merge_threshold=self.merge_threshold,
            weights=self.weights,
        )
        return self

    def fit_predict(self, X, y=None, motion=None):
        return self.fit(X, motion=motion).tracks_
