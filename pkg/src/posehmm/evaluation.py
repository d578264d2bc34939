"""Interval matching: TP/FP/FN counts, precision/recall/F1 and curves."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EventInterval:
    """A labelled half-open frame interval ``[start, end)``."""

    label: str
    start: int
    end: int
    track_id: int | None = None
    source: str = ""

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError(f"interval end {self.end} must exceed start {self.start}")


@dataclass(frozen=True)
class MatchReport:
    tp: int
    fp: int
    fn: int
    overlap_threshold: float

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def temporal_iou(a, b):
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


def _pair_key(a, b, iou):
    # role-symmetric tie-break so swapping truth and prediction visits pairs
    # in the same order
    lo, hi = sorted([(a.start, a.end), (b.start, b.end)])
    return (-iou, lo, hi)


def matched_pairs(truth, predicted, overlap_threshold):
    """Greedy one-to-one matching by descending temporal IoU, per label."""
    by_label = defaultdict(list)
    for j, p in enumerate(predicted):
        by_label[p.label].append(j)
    candidates = []
    for i, t in enumerate(truth):
        for j in by_label.get(t.label, ()):
            iou = temporal_iou(t, predicted[j])
            if iou > overlap_threshold:
                candidates.append((_pair_key(t, predicted[j], iou), i, j))
    candidates.sort()
    used_t, used_p, pairs = set(), set(), []
    for _, i, j in candidates:
        if i not in used_t and j not in used_p:
            used_t.add(i)
            used_p.add(j)
            pairs.append((i, j))
    return pairs


def match_intervals(truth, predicted, overlap_threshold):
    truth, predicted = list(truth), list(predicted)
    tp = len(matched_pairs(truth, predicted, overlap_threshold))
    return MatchReport(tp, len(predicted) - tp, len(truth) - tp, float(overlap_threshold))


def default_overlap_grid():
    return [round(0.05 * k, 10) for k in range(1, 20)]


def sweep_overlap_thresholds(truth, predicted, grid=None):
    grid = default_overlap_grid() if grid is None else list(grid)
    if not grid or any(not 0 < g < 1 for g in grid):
        raise ValueError("overlap grid must be non-empty with values in (0, 1)")
    return [match_intervals(truth, predicted, g) for g in grid]


def pr_curve(scored_predictions, truth, overlap_threshold):
    """``(cutoff, precision, recall)`` for every distinct score, descending."""
    scored = [(iv, float(s)) for iv, s in scored_predictions]
    if any(not np.isfinite(s) for _, s in scored):
        raise ValueError("prediction scores must be finite")
    points = []
    for cutoff in sorted({s for _, s in scored}, reverse=True):
        kept = [iv for iv, s in scored if s >= cutoff]
        rep = match_intervals(truth, kept, overlap_threshold)
        points.append((cutoff, rep.precision, rep.recall))
    return points
