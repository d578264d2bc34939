"""Event detection along object tracks.

Each event model scores quantized candidate intervals on every track, the
candidates go through space-time non-maximum suppression per (model, track),
and survivors at or above the model's likelihood threshold are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._parallel import parallel_map
from .evaluation import EventInterval
from .features import describe
from .hmm import LOG_ZERO, forward, safe_log, logsumexp

START_STEP = 10
LENGTHS = (10, 20, 30, 40, 50)
NMS_THRESHOLD = 0.5**1.5


@dataclass
class Track:
    """Per-frame boxes ``(x, y, w, h)`` over the contiguous range ``[start, end)``."""

    track_id: int
    start: int
    boxes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=int).reshape(-1, 4)
        if np.any(self.boxes[:, 2:] < 1):
            raise ValueError(f"track {self.track_id} has an empty box")

    @property
    def end(self):
        return self.start + len(self.boxes)

    def box(self, frame):
        return tuple(int(v) for v in self.boxes[frame - self.start])

    def __eq__(self, other):
        return (
            isinstance(other, Track)
            and self.track_id == other.track_id
            and self.start == other.start
            and np.array_equal(self.boxes, other.boxes)
        )


@dataclass
class CandidateDetection:
    label: str
    track_id: int
    start: int
    end: int
    log_likelihood: float
    boxes: np.ndarray = field(repr=False)

    @property
    def length(self):
        return self.end - self.start

    def to_interval(self, source=""):
        return EventInterval(self.label, self.start, self.end, self.track_id, source)

    def __eq__(self, other):
        return (
            isinstance(other, CandidateDetection)
            and (self.label, self.track_id, self.start, self.end)
            == (other.label, other.track_id, other.start, other.end)
            and self.log_likelihood == other.log_likelihood
            and np.array_equal(self.boxes, other.boxes)
        )


def generate_candidate_intervals(track_start, track_end, step=START_STEP, lengths=LENGTHS):
    """Half-open ``(start, length)`` windows anchored to the track start."""
    out = []
    for s in range(track_start, track_end, step):
        for length in lengths:
            if s + length <= track_end:
                out.append((s, length))
    return out


def track_descriptors(track, frames):
    return np.stack([describe(frames[f], track.box(f)) for f in range(track.start, track.end)])


def score_interval(model, track_descriptors, start, length):
    """End-state-enforced log-likelihood of ``length`` frames from ``start``.

    ``start`` indexes into ``track_descriptors`` (0 is the track's first frame).
    """
    if start < 0 or start + length > len(track_descriptors) or length < 1:
        raise ValueError(f"descriptors missing for interval [{start}, {start + length})")
    b = model.output_probs(track_descriptors[start : start + length])
    la = forward(b, model.trans_)
    return logsumexp(la[-1] + safe_log(model.trans_.end_prob))


def _score_track(model, track, output_probs):
    """Score every candidate on a track, sharing one forward pass per start."""
    log_end = safe_log(model.trans_.end_prob)
    cands = []
    by_start = {}
    for s, length in generate_candidate_intervals(track.start, track.end):
        by_start.setdefault(s, []).append(length)
    for s, lengths in by_start.items():
        off = s - track.start
        la = forward(output_probs[off : off + max(lengths)], model.trans_)
        for length in lengths:
            ll = logsumexp(la[length - 1] + log_end)
            cands.append(
                CandidateDetection(model.label, track.track_id, s, s + length, ll,
                                   track.boxes[off : off + length])
            )
    return cands


def _box_areas(boxes):
    return boxes[:, 2].astype(float) * boxes[:, 3]


def volume_overlap(a, b):
    """Space-time IoU: summed per-frame box intersections over the union volume."""
    lo, hi = max(a.start, b.start), min(a.end, b.end)
    vol_a = float(_box_areas(a.boxes).sum())
    vol_b = float(_box_areas(b.boxes).sum())
    if hi <= lo:
        return 0.0
    ba = a.boxes[lo - a.start : hi - a.start]
    bb = b.boxes[lo - b.start : hi - b.start]
    ix = np.minimum(ba[:, 0] + ba[:, 2], bb[:, 0] + bb[:, 2]) - np.maximum(ba[:, 0], bb[:, 0])
    iy = np.minimum(ba[:, 1] + ba[:, 3], bb[:, 1] + bb[:, 3]) - np.maximum(ba[:, 1], bb[:, 1])
    inter = float(np.sum(np.maximum(ix, 0).astype(float) * np.maximum(iy, 0)))
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


def nms_order(candidates):
    return sorted(candidates, key=lambda c: (-c.log_likelihood, c.start, -c.length))


def non_max_suppress(candidates, overlap_threshold=NMS_THRESHOLD):
    kept = []
    for c in nms_order(candidates):
        if all(volume_overlap(c, k) <= overlap_threshold for k in kept):
            kept.append(c)
    return kept


def canonical_order(detections):
    return sorted(detections, key=lambda d: (d.label, d.track_id, d.start, d.end))


def detect_events(models, tracks, frames=None, descriptors=None, threshold=None, n_threads=1):
    """Run every model over every track.

    Parameters
    ----------
    models : list of fitted HmmEventModel
    tracks : list of Track
    frames : sequence of 2-D arrays, optional
        Needed unless ``descriptors`` covers every track.
    descriptors : dict, optional
        ``track_id -> (track length, n_features)`` precomputed descriptors.
    threshold : float, optional
        Overrides every model's learned threshold (``-inf`` keeps all survivors).
    """
    descriptors = dict(descriptors or {})
    missing = [t for t in tracks if t.track_id not in descriptors]
    if missing:
        if frames is None:
            raise ValueError("frames are required to describe tracks")
        for t, d in zip(missing, parallel_map(lambda t: track_descriptors(t, frames), missing, n_threads)):
            descriptors[t.track_id] = d

    def run(job):
        model, track = job
        cands = _score_track(model, track, model.output_probs(descriptors[track.track_id]))
        cut = model.threshold_ if threshold is None else threshold
        return [c for c in non_max_suppress(cands) if c.log_likelihood >= cut
                and c.log_likelihood > LOG_ZERO / 2]

    jobs = [(m, t) for m in models for t in tracks]
    out = []
    for dets in parallel_map(run, jobs, n_threads):
        out.extend(dets)
    return canonical_order(out)
