"""Command-line entry point: ``posehmm {synth,train,detect,eval}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
Options may also come from a JSON object given with ``--config`` (keys are
the long option names with ``_`` for ``-``); flags on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys

from ._parallel import THREADS_ENV
from .corpus import (
    CorpusError,
    load_corpus,
    load_model,
    read_intervals,
    read_manifest,
    save_model,
    write_detections,
    write_overlap_curve,
    write_pr_curve,
)
from .detect import detect_events
from .evaluation import default_overlap_grid, match_intervals, pr_curve, sweep_overlap_thresholds
from .synth import SceneSpec, generate_corpus
from .train import HmmEventModel, describe_tracks, instances_for_label

log = logging.getLogger("posehmm")

LABEL_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

# option defaults, applied after --config so that explicit flags always win
DEFAULTS = {
    "states": 5,
    "max_iters": 20,
    "reg": 1000.0,
    "negatives_ratio": 10.0,
    "overlap": 0.1,
    "grid": None,
    "labels": None,
    "spec": None,
}


class UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = argparse.ArgumentParser(prog="posehmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic train/test corpus")
    p.add_argument("--out", required=True, help="output directory (gets train/ and test/)")
    p.add_argument("--seed", type=int, help="train scene seed; the test scene uses seed + 1")
    p.add_argument("--spec", help="JSON scene spec overriding generator defaults")
    _add_common(p)

    p = sub.add_parser("train", help="train one event model per label")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest")
    p.add_argument("--out", required=True, help="directory for <label>.model files")
    p.add_argument("--seed", type=int)
    p.add_argument("--labels", help="comma-separated labels (default: all annotated)")
    p.add_argument("--states", type=int, help="HMM states per model (default 5)")
    p.add_argument("--max-iters", type=int, help="EM iterations (default 20)")
    p.add_argument("--reg", type=float, help="detector regularization (default 1000)")
    p.add_argument("--negatives-ratio", type=float, help="negatives per event frame (default 10)")
    p.add_argument("--overlap", type=float, help="overlap for threshold learning (default 0.1)")
    _add_common(p)

    p = sub.add_parser("detect", help="detect events on a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest")
    p.add_argument("--models", nargs="*", default=None, help="model files")
    p.add_argument("--out", required=True, help="detections JSON-lines file")
    _add_common(p)

    p = sub.add_parser("eval", help="compare detections or annotations against truth")
    p.add_argument("--truth", required=True, help="annotation JSON-lines, corpus dir or manifest")
    p.add_argument("--pred", required=True, help="detections or annotations JSON-lines")
    p.add_argument("--out", required=True, help="directory for curve CSV files")
    p.add_argument("--overlap", type=float, help="overlap for the summary and PR curve (default 0.1)")
    p.add_argument("--grid", help="comma-separated overlap thresholds (default 0.05..0.95)")
    _add_common(p)
    return parser


def _resolve(args):
    """Merge ``--config`` values and defaults into ``args`` (flags win)."""
    cfg = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(k for k in cfg if not hasattr(args, k.replace("-", "_")))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    for key, value in cfg.items():
        key = key.replace("-", "_")
        if getattr(args, key) is None:
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    if args.threads is None:
        env = os.environ.get(THREADS_ENV, "")
        try:
            args.threads = int(env) if env else 1
        except ValueError as e:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from e
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    if args.command in ("synth", "train") and args.seed is None:
        raise UsageError("--seed is required")
    return args


def cmd_synth(args):
    spec = {}
    if args.spec:
        with open(args.spec) as f:
            spec = json.load(f)
    spec.pop("seed", None)
    train = SceneSpec.from_dict({**spec, "seed": args.seed})
    test = SceneSpec.from_dict({**spec, "seed": args.seed + 1})
    paths = generate_corpus(train, test, args.out)
    print(f"wrote {paths['train']} and {paths['test']}")


def cmd_train(args):
    corpus = load_corpus(args.corpus)
    labels = sorted({a.label for a in corpus.annotations})
    if args.labels:
        wanted = [s for s in args.labels.split(",") if s]
        missing = [s for s in wanted if s not in labels]
        if missing:
            raise ValueError(f"no annotations for label(s) {', '.join(missing)}")
        labels = wanted
    if not labels:
        raise ValueError("corpus has no annotations to train on")
    for label in labels:
        if not LABEL_RE.match(label):
            raise ValueError(f"label {label!r} is not usable as a file name")
    descriptors = describe_tracks(corpus.tracks, corpus.frames, args.threads)
    os.makedirs(args.out, exist_ok=True)
    for label in labels:
        instances = instances_for_label(label, corpus.tracks, corpus.annotations, descriptors)
        model = HmmEventModel(
            label=label, n_states=args.states, max_iter=args.max_iters, reg=args.reg,
            negatives_ratio=args.negatives_ratio, overlap_threshold=args.overlap,
            seed=args.seed, n_threads=args.threads,
        )
        model.fit(instances, frames=corpus.frames)
        model.learn_threshold(corpus.tracks, corpus.annotations, corpus.frames, descriptors)
        path = save_model(model, os.path.join(args.out, f"{label}.model"))
        print(f"{label}: {len(instances)} instances, {model.n_iter_} iterations, "
              f"threshold {model.threshold_:.6f} -> {path}")


def cmd_detect(args):
    if not args.models:
        raise UsageError("at least one model file is required (--models)")
    models = [load_model(p) for p in args.models]
    corpus = load_corpus(args.corpus)
    dets = detect_events(models, corpus.tracks, corpus.frames, n_threads=args.threads)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_detections(args.out, dets)
    print(f"{len(dets)} detections -> {args.out}")


def _load_truth(path):
    if os.path.isdir(path) or path.endswith("manifest.json"):
        manifest, root = read_manifest(path)
        path = os.path.join(root, manifest["annotations"])
    return [iv for iv, _ in read_intervals(path, source="truth")]


def _parse_grid(text):
    if text is None:
        return default_overlap_grid()
    if isinstance(text, list):
        grid = [float(v) for v in text]
    else:
        try:
            grid = [float(v) for v in str(text).split(",") if v.strip()]
        except ValueError as e:
            raise UsageError(f"bad --grid value {text!r}") from e
    if not grid or any(not 0 < v < 1 for v in grid):
        raise UsageError("--grid needs values in (0, 1)")
    return grid


def cmd_eval(args):
    grid = _parse_grid(args.grid)
    if not 0 <= args.overlap < 1:
        raise UsageError("--overlap must lie in [0, 1)")
    truth = _load_truth(args.truth)
    scored = read_intervals(args.pred, source="pred")
    pred = [iv for iv, _ in scored]
    os.makedirs(args.out, exist_ok=True)
    reports = sweep_overlap_thresholds(truth, pred, grid)
    write_overlap_curve(os.path.join(args.out, "overlap_curve.csv"), reports)
    written = ["overlap_curve.csv"]
    if scored and all(s is not None for _, s in scored):
        points = pr_curve([(iv, float(s)) for iv, s in scored], truth, args.overlap)
        write_pr_curve(os.path.join(args.out, "pr_curve.csv"), points)
        written.append("pr_curve.csv")
    rows = [("all", match_intervals(truth, pred, args.overlap))]
    for label in sorted({a.label for a in truth} | {p.label for p in pred}):
        t = [a for a in truth if a.label == label]
        p = [a for a in pred if a.label == label]
        rows.append((label, match_intervals(t, p, args.overlap)))
    print(f"overlap {args.overlap:g}")
    print(f"{'label':<12} {'tp':>4} {'fp':>4} {'fn':>4} {'precision':>9} {'recall':>9} {'f1':>9}")
    for label, r in rows:
        print(f"{label:<12} {r.tp:>4} {r.fp:>4} {r.fn:>4} "
              f"{r.precision:>9.4f} {r.recall:>9.4f} {r.f1:>9.4f}")
    print(f"curves: {', '.join(os.path.join(args.out, w) for w in written)}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        _resolve(args)
        COMMANDS[args.command](args)
    except UsageError as e:
        parser.error(str(e))
    except (CorpusError, OSError, ValueError, RuntimeError) as e:
        print(f"posehmm: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
