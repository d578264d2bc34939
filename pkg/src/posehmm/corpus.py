"""On-disk formats: corpora, model files, detections and curve tables.

A corpus directory holds ``manifest.json``, one binary PGM (P5, 8-bit) per
frame, and JSON-lines files for tracks and annotations.  Model files are a
one-line text header followed by a JSON body whose floats are written with
Python's shortest round-trip representation, so reloading is bit-exact.
See ``docs/formats.md`` for byte-level examples.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .detect import CandidateDetection, Track
from .detector import LinearDetector
from .evaluation import EventInterval
from .hmm import TransitionMatrix

CORPUS_VERSION = 1
MODEL_HEADER = "POSEHMM-MODEL"
MODEL_VERSION = 1
SUPPORTED_CORPUS_VERSIONS = {1}


class CorpusError(Exception):
    pass


class MissingFileError(CorpusError):
    pass


class MalformedRecordError(CorpusError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path, self.line = path, line


class BoxOutOfBoundsError(MalformedRecordError):
    pass


class VersionError(CorpusError):
    pass


class ModelFormatError(CorpusError):
    pass


# -- PGM --------------------------------------------------------------------

def write_pgm(path, img):
    img = np.asarray(img, dtype=float)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_pgm(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as e:
        raise MissingFileError(f"missing frame file {path}") from e
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorpusError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise CorpusError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise CorpusError(f"{path}: truncated PGM data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) / 255.0


# -- JSON lines -------------------------------------------------------------

def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"))


def write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(_dumps(r) + "\n")


def read_jsonl(path):
    """Yield ``(line number, record)``; blank lines are skipped."""
    try:
        f = open(path)
    except FileNotFoundError as e:
        raise MissingFileError(f"missing file {path}") from e
    with f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecordError(path, n, f"invalid JSON ({e.msg})") from e
            if not isinstance(rec, dict):
                raise MalformedRecordError(path, n, "record is not an object")
            yield n, rec


def _int_field(path, n, rec, key):
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise MalformedRecordError(path, n, f"field {key!r} must be an integer")
    return v


def _str_field(path, n, rec, key):
    v = rec.get(key)
    if not isinstance(v, str):
        raise MalformedRecordError(path, n, f"field {key!r} must be a string")
    return v


def track_records(tracks):
    for t in sorted(tracks, key=lambda t: t.track_id):
        for f in range(t.start, t.end):
            x, y, w, h = t.box(f)
            yield {"track_id": t.track_id, "frame": f, "x": x, "y": y, "w": w, "h": h}


def read_tracks(path, width=None, height=None):
    rows = defaultdict(list)
    for n, rec in read_jsonl(path):
        tid = _int_field(path, n, rec, "track_id")
        frame = _int_field(path, n, rec, "frame")
        x, y, w, h = (_int_field(path, n, rec, k) for k in "xywh")
        if w < 1 or h < 1:
            raise MalformedRecordError(path, n, "box has non-positive size")
        if width is not None and (x < 0 or y < 0 or x + w > width or y + h > height):
            raise BoxOutOfBoundsError(path, n, f"box {(x, y, w, h)} exceeds {width}x{height} frame")
        rows[tid].append((frame, (x, y, w, h), n))
    tracks = []
    for tid in sorted(rows):
        recs = sorted(rows[tid])
        frames = [r[0] for r in recs]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise MalformedRecordError(path, recs[-1][2], f"track {tid} frames are not contiguous")
        tracks.append(Track(tid, frames[0], [r[1] for r in recs]))
    return tracks


def annotation_record(a):
    return {"label": a.label, "track_id": a.track_id, "start": a.start, "end": a.end}


def write_annotations(path, annotations):
    write_jsonl(path, (annotation_record(a) for a in annotations))


def read_annotations(path, source=None):
    source = source if source is not None else os.path.basename(path)
    out = []
    for n, rec in read_jsonl(path):
        label = _str_field(path, n, rec, "label")
        start, end = _int_field(path, n, rec, "start"), _int_field(path, n, rec, "end")
        tid = rec.get("track_id")
        if tid is not None and (isinstance(tid, bool) or not isinstance(tid, int)):
            raise MalformedRecordError(path, n, "field 'track_id' must be an integer")
        if end <= start:
            raise MalformedRecordError(path, n, "interval end must exceed start")
        out.append(EventInterval(label, start, end, tid, source))
    return out


# -- corpus -----------------------------------------------------------------

@dataclass
class Corpus:
    frames: np.ndarray
    tracks: list
    annotations: list
    pose_labels: dict | None
    manifest: dict
    root: str


def write_scene(out_dir, frames, tracks, truth=None, spec=None, frame_pattern="frames/%06d.pgm"):
    """Write a corpus directory and return the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.dirname(os.path.join(out_dir, frame_pattern % 0)), exist_ok=True)
    n, h, w = np.shape(frames)
    for f in range(n):
        write_pgm(os.path.join(out_dir, frame_pattern % f), frames[f])
    write_jsonl(os.path.join(out_dir, "tracks.jsonl"), track_records(tracks))
    annotations = truth.annotations if truth is not None else []
    write_annotations(os.path.join(out_dir, "annotations.jsonl"), annotations)
    manifest = {
        "version": CORPUS_VERSION,
        "width": w,
        "height": h,
        "frame_count": n,
        "frame_pattern": frame_pattern,
        "tracks": "tracks.jsonl",
        "annotations": "annotations.jsonl",
    }
    if truth is not None:
        write_jsonl(
            os.path.join(out_dir, "pose_labels.jsonl"),
            (
                {"track_id": tid, "frame": t.start + i, "pose_index": int(p)}
                for t in sorted(tracks, key=lambda t: t.track_id)
                for tid in [t.track_id]
                for i, p in enumerate(truth.pose_labels[tid])
            ),
        )
        manifest["pose_labels"] = "pose_labels.jsonl"
    if spec is not None:
        with open(os.path.join(out_dir, "scene_spec.json"), "w") as f:
            f.write(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        f.write(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise MissingFileError(f"missing manifest {path}") from e
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}: malformed manifest ({e.msg})") from e
    required = ("version", "width", "height", "frame_count", "frame_pattern", "tracks", "annotations")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise CorpusError(f"{path}: manifest lacks {', '.join(missing)}")
    if manifest["version"] not in SUPPORTED_CORPUS_VERSIONS:
        raise VersionError(f"{path}: unsupported corpus version {manifest['version']}")
    return manifest, os.path.dirname(os.path.abspath(path))


def load_corpus(path):
    """Load ``(frames, tracks, annotations)`` plus sidecars as a :class:`Corpus`."""
    manifest, root = read_manifest(path)
    w, h = manifest["width"], manifest["height"]
    frames = np.empty((manifest["frame_count"], h, w))
    for f in range(manifest["frame_count"]):
        fp = os.path.join(root, manifest["frame_pattern"] % f)
        img = read_pgm(fp)
        if img.shape != (h, w):
            raise CorpusError(f"{fp}: frame is {img.shape[1]}x{img.shape[0]}, expected {w}x{h}")
        frames[f] = img
    tpath = os.path.join(root, manifest["tracks"])
    tracks = read_tracks(tpath, w, h)
    for t in tracks:
        if t.start < 0 or t.end > len(frames):
            raise CorpusError(f"{tpath}: track {t.track_id} extends past the video")
    annotations = read_annotations(os.path.join(root, manifest["annotations"]), source="truth")
    pose_labels = None
    if "pose_labels" in manifest:
        by_track = {t.track_id: t for t in tracks}
        pose_labels = {tid: np.full(len(t.boxes), -1, dtype=int) for tid, t in by_track.items()}
        ppath = os.path.join(root, manifest["pose_labels"])
        for n, rec in read_jsonl(ppath):
            tid = _int_field(ppath, n, rec, "track_id")
            if tid not in by_track:
                raise MalformedRecordError(ppath, n, f"unknown track {tid}")
            frame = _int_field(ppath, n, rec, "frame")
            pose_labels[tid][frame - by_track[tid].start] = _int_field(ppath, n, rec, "pose_index")
    return Corpus(frames, tracks, annotations, pose_labels, manifest, root)


# -- models -----------------------------------------------------------------

def _floats(values):
    return [float(v) for v in np.asarray(values, dtype=float).ravel()]


def model_to_dict(model):
    if model.threshold_ is None or not math.isfinite(model.threshold_):
        raise ValueError("model has no finite detection threshold")
    return {
        "label": model.label,
        "n_states": model.n_states,
        "transitions": {
            "probs": [_floats(r) for r in model.trans_.probs],
            "end_prob": _floats(model.trans_.end_prob),
        },
        "detectors": [
            {
                "weights": _floats(d.coef_),
                "bias": float(d.intercept_),
                "score_min": d.score_min_,
                "score_max": d.score_max_,
                "floor": float(d.floor),
            }
            for d in model.detectors_
        ],
        "threshold": float(model.threshold_),
        "config": model.config(),
        "training": {
            "seed": model.seed,
            "iterations": model.n_iter_,
            "log_likelihood_trace": [float(v) for v in model.trace_],
        },
    }


def dumps_model(model):
    body = json.dumps(model_to_dict(model), sort_keys=True, indent=1)
    return f"{MODEL_HEADER} {MODEL_VERSION}\n{body}\n"


def save_model(model, path):
    text = dumps_model(model)
    with open(path, "w") as f:
        f.write(text)
    return path


def _num(v, what):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ModelFormatError(f"corrupted numeric field {what}: {v!r}")
    return float(v)


def _num_list(v, what, length=None):
    if not isinstance(v, list) or (length is not None and len(v) != length):
        raise ModelFormatError(f"field {what} must be a list of {length} numbers")
    return np.array([_num(x, what) for x in v])


def loads_model(text):
    from .train import HmmEventModel

    head, _, body = text.partition("\n")
    parts = head.split()
    if len(parts) != 2 or parts[0] != MODEL_HEADER:
        raise ModelFormatError("not a model file")
    if parts[1] != str(MODEL_VERSION):
        raise VersionError(f"unsupported model version {parts[1]}")
    try:
        d = json.loads(body)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"corrupted or truncated model body ({e.msg})") from e
    try:
        n = int(d["n_states"])
        cfg = d["config"]
        det_cfg = cfg["detector"]
        model = HmmEventModel(
            label=str(d["label"]), n_states=n, max_iter=cfg["max_iter"], tol=cfg["tol"],
            reg=det_cfg["reg"], solver=det_cfg["solver"], epochs=det_cfg["epochs"],
            batch_size=det_cfg["batch_size"],
            floor=det_cfg["floor"], negatives_ratio=cfg["negatives_ratio"],
            prune=det_cfg["prune"], overlap_threshold=cfg["overlap_threshold"],
            seed=d["training"]["seed"],
        )
        probs = np.array([_num_list(r, "transitions.probs", n) for r in d["transitions"]["probs"]])
        end = _num_list(d["transitions"]["end_prob"], "transitions.end_prob", n)
        if probs.shape != (n, n):
            raise ModelFormatError("transition matrix has the wrong shape")
        trans = TransitionMatrix(probs, end)
        try:
            trans.validate()
        except ValueError as e:
            raise ModelFormatError(f"invalid transitions: {e}") from e
        if len(d["detectors"]) != n:
            raise ModelFormatError(f"expected {n} detectors, found {len(d['detectors'])}")
        length = cfg["descriptor"]["patch_size"] // cfg["descriptor"]["cell_size"]
        length = length * length * cfg["descriptor"]["n_bins"]
        detectors = []
        for k, rec in enumerate(d["detectors"]):
            det = LinearDetector(reg=det_cfg["reg"], solver=det_cfg["solver"],
                                 epochs=det_cfg["epochs"],
                                 batch_size=det_cfg["batch_size"], seed=det_cfg["seed"],
                                 floor=_num(rec["floor"], f"detectors[{k}].floor"))
            det.coef_ = _num_list(rec["weights"], f"detectors[{k}].weights", length)
            det.intercept_ = _num(rec["bias"], f"detectors[{k}].bias")
            det.score_min_ = _num(rec["score_min"], f"detectors[{k}].score_min")
            det.score_max_ = _num(rec["score_max"], f"detectors[{k}].score_max")
            det.classes_ = np.array([-1, 1])
            det.n_features_in_ = length
            if not det.score_max_ > det.score_min_ or not 0 < det.floor < 1:
                raise ModelFormatError(f"detector {k} has an invalid calibration")
            detectors.append(det)
        model.trans_ = trans
        model.detectors_ = detectors
        model.threshold_ = _num(d["threshold"], "threshold")
        model.trace_ = [_num(v, "log_likelihood_trace") for v in d["training"]["log_likelihood_trace"]]
        model.n_iter_ = int(d["training"]["iterations"])
        model.n_features_in_ = length
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CorpusError):
            raise
        raise ModelFormatError(f"malformed model file ({e!r})") from e
    return model


def load_model(path):
    try:
        with open(path) as f:
            text = f.read()
    except FileNotFoundError as e:
        raise MissingFileError(f"missing model file {path}") from e
    return loads_model(text)


# -- detections and curves --------------------------------------------------

def detection_record(d):
    return {
        "label": d.label,
        "track_id": d.track_id,
        "start": d.start,
        "end": d.end,
        "log_likelihood": float(d.log_likelihood),
        "boxes": [
            {"frame": d.start + i, "x": int(b[0]), "y": int(b[1]), "w": int(b[2]), "h": int(b[3])}
            for i, b in enumerate(d.boxes)
        ],
    }


def write_detections(path, detections):
    write_jsonl(path, (detection_record(d) for d in detections))


def read_detections(path):
    out = []
    for n, rec in read_jsonl(path):
        label = _str_field(path, n, rec, "label")
        tid = _int_field(path, n, rec, "track_id")
        start, end = _int_field(path, n, rec, "start"), _int_field(path, n, rec, "end")
        ll = rec.get("log_likelihood")
        if isinstance(ll, bool) or not isinstance(ll, (int, float)):
            raise MalformedRecordError(path, n, "field 'log_likelihood' must be a number")
        boxes = rec.get("boxes")
        if not isinstance(boxes, list) or len(boxes) != end - start:
            raise MalformedRecordError(path, n, "one box per frame is required")
        arr = np.array([[b["x"], b["y"], b["w"], b["h"]] for b in boxes], dtype=int).reshape(-1, 4)
        out.append(CandidateDetection(label, tid, start, end, float(ll), arr))
    return out


def read_intervals(path, source=None):
    """Annotations or detections as ``(EventInterval, score or None)`` pairs."""
    source = source if source is not None else os.path.basename(path)
    out = []
    for n, rec in read_jsonl(path):
        label = _str_field(path, n, rec, "label")
        start, end = _int_field(path, n, rec, "start"), _int_field(path, n, rec, "end")
        if end <= start:
            raise MalformedRecordError(path, n, "interval end must exceed start")
        score = rec.get("log_likelihood")
        out.append((EventInterval(label, start, end, rec.get("track_id"), source), score))
    return out


def write_overlap_curve(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall", "f1"])
        for r in reports:
            w.writerow([repr(r.overlap_threshold), repr(r.precision), repr(r.recall), repr(r.f1)])


def write_pr_curve(path, points):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cutoff", "precision", "recall"])
        for cutoff, p, r in points:
            w.writerow([repr(float(cutoff)), repr(p), repr(r)])
