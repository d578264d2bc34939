"""Deterministic synthetic scenes of objects changing pose along tracks.

Every track carries one object.  Between events the object shows an idle
pose; during an event it steps through the event's pose templates, with a
short linear cross-fade between consecutive poses.  Frames are quantized to
8 bits so that a saved and reloaded corpus is bit-identical.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import write_scene
from .detect import LENGTHS, Track
from .evaluation import EventInterval
from .features import describe

# exact 8-bit levels, so noise-free renderings survive quantization unchanged
BACKGROUND = 76 / 255
FOREGROUND = 230 / 255
FADE_HALF_WIDTH = 1.5


class InfeasibleSceneError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """Parametric shape rendered in box-normalized coordinates.

    ``kind`` is one of ``bar`` (angle in degrees), ``rect`` (aspect ratio),
    ``disk`` (radius), ``ring`` (radius) or ``cross`` (angle).
    """

    kind: str
    value: float = 0.0

    def render(self, size):
        """Foreground mask in ``{0, 1}`` for a ``size x size`` box."""
        c = (np.arange(size) + 0.5) / size - 0.5
        yy, xx = np.meshgrid(c, c, indexing="ij")
        if self.kind in ("bar", "cross"):
            mask = _bar(xx, yy, self.value)
            if self.kind == "cross":
                mask |= _bar(xx, yy, self.value + 90.0)
        elif self.kind == "rect":
            half_w = 0.2 * np.sqrt(self.value)
            half_h = 0.2 / np.sqrt(self.value)
            mask = (np.abs(xx) <= min(half_w, 0.45)) & (np.abs(yy) <= min(half_h, 0.45))
        elif self.kind == "disk":
            mask = np.hypot(xx, yy) <= self.value
        elif self.kind == "ring":
            r = np.hypot(xx, yy)
            mask = (r <= self.value) & (r >= self.value - 0.1)
        else:
            raise ValueError(f"unknown pose kind {self.kind!r}")
        return mask.astype(float)


def _bar(xx, yy, angle_deg, half_length=0.42, half_width=0.08):
    a = np.deg2rad(angle_deg)
    along = xx * np.cos(a) - yy * np.sin(a)
    across = xx * np.sin(a) + yy * np.cos(a)
    return (np.abs(along) <= half_length) & (np.abs(across) <= half_width)


@dataclass(frozen=True)
class EventClass:
    name: str
    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 2:
            raise ValueError(f"event class {self.name!r} needs at least 2 poses")


def default_event_classes():
    return (
        EventClass("raise", (Pose("bar", 0), Pose("bar", 45), Pose("bar", 90))),
        EventClass("lower", (Pose("bar", 90), Pose("bar", 135), Pose("bar", 0))),
        EventClass("grow", (Pose("disk", 0.12), Pose("rect", 1.0), Pose("ring", 0.42))),
    )


@dataclass(frozen=True)
class SceneSpec:
    n_frames: int = 900
    width: int = 192
    height: int = 96
    box_size: int = 48
    n_tracks: int = 2
    event_classes: tuple = field(default_factory=default_event_classes)
    events_per_class: int = 10
    duration_range: tuple = (20, 40)
    min_gap: int = 10
    idle_pose: Pose = Pose("cross", 0.0)
    clutter: int = 8
    noise: float = 0.05
    drift: int = 6
    seed: int = 0

    def validate(self):
        lo, hi = self.duration_range
        if not (min(LENGTHS) <= lo <= hi <= max(LENGTHS)):
            raise ValueError(f"event durations must lie in [{min(LENGTHS)}, {max(LENGTHS)}]")
        if self.width < 8 or self.height < 8:
            raise ValueError("frames must be at least 8x8")
        slot = self.width // self.n_tracks
        if self.box_size + 2 * self.drift > slot or self.box_size + self.drift > self.height:
            raise ValueError("tracks do not fit in the frame")
        for ec in self.event_classes:
            if len(ec.poses) < 2:
                raise ValueError(f"event class {ec.name!r} needs at least 2 poses")
        return self

    def to_dict(self):
        d = asdict(self)
        d["event_classes"] = [
            {"name": ec.name, "poses": [[p.kind, p.value] for p in ec.poses]}
            for ec in self.event_classes
        ]
        d["idle_pose"] = [self.idle_pose.kind, self.idle_pose.value]
        d["duration_range"] = list(self.duration_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "event_classes" in d:
            d["event_classes"] = tuple(
                EventClass(ec["name"], tuple(Pose(k, float(v)) for k, v in ec["poses"]))
                for ec in d["event_classes"]
            )
        if "idle_pose" in d:
            d["idle_pose"] = Pose(d["idle_pose"][0], float(d["idle_pose"][1]))
        if "duration_range" in d:
            d["duration_range"] = tuple(d["duration_range"])
        return cls(**d)


@dataclass
class GroundTruth:
    annotations: list
    pose_labels: dict  # track_id -> int array over the track's frames, -1 when idle


def quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_object(pose, size):
    """Noise-free 8-bit rendering of a pose filling a ``size x size`` box."""
    return quantize(BACKGROUND + (FOREGROUND - BACKGROUND) * pose.render(size))


def check_pose_separability(spec, min_distance=0.1):
    """Noise-free descriptors of all distinct poses must be pairwise apart."""
    poses = {spec.idle_pose}
    for ec in spec.event_classes:
        poses.update(ec.poses)
    poses = sorted(poses, key=lambda p: (p.kind, p.value))
    size = spec.box_size
    descs = [describe(render_object(p, size), (0, 0, size, size)) for p in poses]
    for i in range(len(poses)):
        for j in range(i + 1, len(poses)):
            d = float(np.linalg.norm(descs[i] - descs[j]))
            if d <= min_distance:
                raise ValueError(f"poses {poses[i]} and {poses[j]} are not separable ({d:.3f})")


def _track_boxes(spec, k, n_frames):
    slot = spec.width // spec.n_tracks
    x0 = k * slot + (slot - spec.box_size) // 2
    y0 = (spec.height - spec.box_size) // 2
    t = np.arange(n_frames)
    period = 120 + 37 * k
    dx = np.round(spec.drift * np.sin(2 * np.pi * t / period)).astype(int)
    dy = np.round(0.5 * spec.drift * np.sin(2 * np.pi * t / (period * 1.7) + k)).astype(int)
    boxes = np.zeros((n_frames, 4), dtype=int)
    boxes[:, 0] = x0 + dx
    boxes[:, 1] = np.clip(y0 + dy, 0, spec.height - spec.box_size)
    boxes[:, 2] = spec.box_size
    boxes[:, 3] = spec.box_size
    return boxes


def _layout_events(spec, rng):
    """Per track, a list of ``(start, duration, class index)``."""
    n_cls = len(spec.event_classes)
    classes = np.repeat(np.arange(n_cls), spec.events_per_class)
    classes = classes[rng.permutation(len(classes))]
    per_track = [list(classes[k :: spec.n_tracks]) for k in range(spec.n_tracks)]
    lo, hi = spec.duration_range
    layout = []
    for k, cls_list in enumerate(per_track):
        n = len(cls_list)
        durations = rng.integers(lo, hi + 1, size=n)
        slack = spec.n_frames - int(durations.sum()) - (n + 1) * spec.min_gap
        if slack < 0:
            raise InfeasibleSceneError(
                f"track {k}: {n} events need {spec.n_frames - slack} frames, have {spec.n_frames}"
            )
        cuts = np.sort(rng.integers(0, slack + 1, size=n))
        extra = np.diff(np.r_[0, cuts])
        events = []
        t = 0
        for i in range(n):
            t += spec.min_gap + int(extra[i])
            events.append((t, int(durations[i]), int(cls_list[i])))
            t += int(durations[i])
        layout.append(events)
    return layout


def _pose_cuts(duration, k, rng):
    """Boundaries between the k pose segments, jittered around equal splits."""
    nominal = duration / k
    cuts = []
    for j in range(1, k):
        c = int(round(j * nominal + rng.uniform(-0.25, 0.25) * nominal))
        lo = (cuts[-1] if cuts else 0) + 2
        hi = duration - 2 * (k - j)
        cuts.append(min(max(c, lo), hi))
    return cuts


def _event_frames(duration, k, rng):
    """Per frame ``(pose_a, pose_b, blend)`` plus the ground-truth pose index."""
    cuts = _pose_cuts(duration, k, rng)
    seg = np.searchsorted(cuts, np.arange(duration), side="right")
    plan = []
    labels = []
    for f in range(duration):
        a, b, w = int(seg[f]), int(seg[f]), 0.0
        for j, c in enumerate(cuts):
            # cross-fade from pose j to j+1 around the cut
            u = (f - c + 0.5) / (2 * FADE_HALF_WIDTH) + 0.5
            if 0.0 < u < 1.0:
                a, b, w = j, j + 1, u
        plan.append((a, b, w))
        labels.append(b if w >= 0.5 else a)
    return plan, labels


def _place_clutter(spec, rng, tracks):
    """Static shapes that never intersect any track's swept region."""
    swept = []
    for t in tracks:
        x0, y0 = t.boxes[:, 0].min(), t.boxes[:, 1].min()
        x1 = (t.boxes[:, 0] + t.boxes[:, 2]).max()
        y1 = (t.boxes[:, 1] + t.boxes[:, 3]).max()
        swept.append((x0, y0, x1, y1))
    shapes = []
    kinds = [Pose("bar", 30), Pose("disk", 0.4), Pose("rect", 2.0), Pose("ring", 0.45)]
    tries = 0
    while len(shapes) < spec.clutter and tries < 200 * max(spec.clutter, 1):
        tries += 1
        s = int(rng.integers(8, 17))
        x = int(rng.integers(0, spec.width - s + 1))
        y = int(rng.integers(0, spec.height - s + 1))
        if any(x < x1 and x + s > x0 and y < y1 and y + s > y0 for x0, y0, x1, y1 in swept):
            continue
        pose = kinds[int(rng.integers(len(kinds)))]
        shapes.append((x, y, s, pose, float(rng.uniform(0.5, 0.9))))
    return shapes


def generate_scene(spec):
    """Render a scene; returns ``(frames, tracks, ground_truth)``.

    ``frames`` has shape ``(n_frames, height, width)`` with values ``k / 255``.
    """
    spec.validate()
    check_pose_separability(spec)
    rng = np.random.default_rng(spec.seed)
    layout = _layout_events(spec, rng)

    tracks = [Track(k, 0, _track_boxes(spec, k, spec.n_frames)) for k in range(spec.n_tracks)]

    background = np.full((spec.height, spec.width), BACKGROUND)
    for x, y, s, pose, level in _place_clutter(spec, rng, tracks):
        region = background[y : y + s, x : x + s]
        region += (level - BACKGROUND) * pose.render(s)

    size = spec.box_size
    idle = spec.idle_pose.render(size)
    masks = {}

    def mask_of(pose):
        if pose not in masks:
            masks[pose] = pose.render(size)
        return masks[pose]

    annotations = []
    pose_labels = {}
    # per track, per frame foreground mask
    object_masks = []
    for track, events in zip(tracks, layout):
        frame_masks = [idle] * spec.n_frames
        labels = np.full(spec.n_frames, -1, dtype=int)
        for start, duration, ci in events:
            ec = spec.event_classes[ci]
            plan, pose_idx = _event_frames(duration, len(ec.poses), rng)
            for f, (a, b, w) in enumerate(plan):
                m = mask_of(ec.poses[a])
                if w > 0:
                    m = (1.0 - w) * m + w * mask_of(ec.poses[b])
                frame_masks[start + f] = m
            labels[start : start + duration] = pose_idx
            annotations.append(EventInterval(ec.name, start, start + duration, track.track_id, "truth"))
        object_masks.append(frame_masks)
        pose_labels[track.track_id] = labels

    noise_rng = np.random.default_rng([spec.seed, 1])
    frames = np.empty((spec.n_frames, spec.height, spec.width))
    for f in range(spec.n_frames):
        img = background.copy()
        for track, fm in zip(tracks, object_masks):
            x, y, w, h = track.box(f)
            img[y : y + h, x : x + w] = BACKGROUND + (FOREGROUND - BACKGROUND) * fm[f]
        if spec.noise > 0:
            img += noise_rng.uniform(-spec.noise, spec.noise, size=img.shape)
        frames[f] = img
    frames = quantize(frames)

    annotations.sort(key=lambda a: (a.start, a.track_id))
    return frames, tracks, GroundTruth(annotations, pose_labels)


def generate_corpus(spec_train, spec_test, out_dir):
    """Write train and test scenes under ``out_dir/train`` and ``out_dir/test``."""
    if spec_train.seed == spec_test.seed:
        raise ValueError("train and test scenes need distinct seeds")
    paths = {}
    for name, spec in (("train", spec_train), ("test", spec_test)):
        frames, tracks, truth = generate_scene(spec)
        paths[name] = write_scene(f"{out_dir}/{name}", frames, tracks, truth, spec)
    return paths
