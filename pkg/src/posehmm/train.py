"""EM training of event models whose state output models are detectors.

The E step runs forward-backward on every training instance; the M step
re-estimates the transitions from the pooled ``xi`` tables and retrains each
state's detector on all event frames weighted by that state's ``gamma``,
against a shared set of random negatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._parallel import parallel_map
from .detect import Track, detect_events, track_descriptors
from .detector import LinearDetector
from .evaluation import match_intervals
from .features import CELL_SIZE, N_BINS, PATCH_SIZE, compute_descriptor, sample_negative_patches
from .hmm import TransitionMatrix, forward_backward, update_transitions

log = logging.getLogger(__name__)


class StarvedStateError(RuntimeError):
    def __init__(self, state, mass):
        super().__init__(f"starved state {state}: total gamma mass {mass:.3g} < 1")
        self.state = state


class NoCandidatesError(RuntimeError):
    pass


@dataclass
class TrainingInstance:
    """One annotated event: the observations for frames ``[event_start, event_end)``."""

    track: Track | None
    event_start: int
    event_end: int
    descriptors: np.ndarray

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors)
        if len(self.descriptors) != self.event_end - self.event_start:
            raise ValueError("descriptor count does not match the event span")

    def __len__(self):
        return self.event_end - self.event_start


class DetectorEmissions:
    """State output model: one calibrated :class:`LinearDetector` per state."""

    def __init__(self, detectors=None):
        self.detectors = list(detectors or [])

    def fit(self, instances, gammas, negatives, hyper):
        X_pos = np.concatenate([inst.descriptors for inst in instances]).astype(float)
        G = np.concatenate(gammas)
        negatives = np.asarray(negatives, dtype=float)

        def train_state(i):
            w = G[:, i]
            keep = w >= hyper.get("prune", 1e-4)
            X = np.vstack([X_pos[keep], negatives])
            y = np.r_[np.ones(keep.sum()), -np.ones(len(negatives))]
            sw = np.r_[w[keep], np.ones(len(negatives))]
            det = LinearDetector(
                reg=hyper.get("reg", 1000.0),
                solver=hyper.get("solver", "dual"),
                epochs=hyper.get("epochs", 50),
                batch_size=hyper.get("batch_size", 64),
                seed=hyper.get("seed", 0),
                floor=hyper.get("floor", 1e-3),
            )
            return det.fit(X, y, sw)

        self.detectors = parallel_map(train_state, range(G.shape[1]), hyper.get("n_threads", 1))
        return self

    def output_probs(self, X):
        X = np.asarray(X, dtype=float)
        return np.column_stack([d.normalized_score(X) for d in self.detectors])


class TableEmissions:
    """Discrete emission table over integer observations (generative test hook).

    With ``update=False`` the table is held fixed, so EM only re-estimates
    transitions and the classical likelihood guarantee applies.
    """

    def __init__(self, table, update=False):
        self.table = np.asarray(table, dtype=float)
        self.update = update

    def fit(self, instances, gammas, negatives=None, hyper=None):
        if self.update:
            obs = np.concatenate([np.asarray(i.descriptors, int) for i in instances])
            G = np.concatenate(gammas)
            counts = np.zeros_like(self.table)
            for k in range(self.table.shape[1]):
                counts[:, k] = G[obs == k].sum(axis=0)
            mass = counts.sum(axis=1, keepdims=True)
            self.table = np.where(mass > 0, counts / np.where(mass > 0, mass, 1), self.table)
        return self

    def output_probs(self, X):
        return self.table[:, np.asarray(X, dtype=int)].T


def initialize_assignments(instances, n_states):
    """One-hot gammas splitting each instance into equal contiguous segments.

    Remainder frames go to the later segments, e.g. 7 frames over 3 states
    gives segment lengths (2, 2, 3).
    """
    gammas = []
    for k, inst in enumerate(instances):
        T = len(inst)
        if T < n_states:
            raise ValueError(f"instance {k} has {T} frames, fewer than {n_states} states")
        base, rem = divmod(T, n_states)
        lengths = [base + (1 if i >= n_states - rem else 0) for i in range(n_states)]
        states = np.repeat(np.arange(n_states), lengths)
        gammas.append(np.eye(n_states)[states])
    return gammas


def _pool_counts(gammas, xis, n_states):
    xi_sum = np.zeros((n_states, n_states))
    exits = np.zeros(n_states)
    for k, g in enumerate(gammas):
        if xis is None:
            xi_sum += g[:-1].T @ g[1:]
        else:
            xi_sum += xis[k].sum(axis=0)
        exits += g[-1]
    return xi_sum, exits


def m_step(instances, gammas, prev_trans, emissions, negatives, hyper, xis=None):
    """Re-estimate transitions and retrain the state output models.

    When ``xis`` is None (first iteration) transition counts come from
    consecutive-frame products of the (one-hot) gammas.
    """
    n_states = gammas[0].shape[1]
    mass = np.sum([g.sum(axis=0) for g in gammas], axis=0)
    for i, m in enumerate(mass):
        if m < 1.0:
            raise StarvedStateError(i, m)
    xi_sum, exits = _pool_counts(gammas, xis, n_states)
    trans = update_transitions(xi_sum, exits, prev_trans)
    emissions.fit(instances, gammas, negatives, hyper)
    return trans, emissions


def e_step(instances, trans, emissions, n_threads=1):
    """Posteriors for every instance; returns ``(gammas, xis, total_log_likelihood)``."""

    def one(inst):
        return forward_backward(emissions.output_probs(inst.descriptors), trans)

    posts = parallel_map(one, instances, n_threads)
    total = 0.0
    for p in posts:
        total += p.log_likelihood
    return [p.gamma for p in posts], [p.xi for p in posts], total


def run_em(instances, n_states, emissions, negatives=None, hyper=None, max_iter=20, tol=1e-3,
           n_threads=1):
    """Alternate M and E steps from a uniform segmentation.

    Returns ``(trans, emissions, trace, gammas, n_iter)`` where ``trace`` is the
    total log-likelihood after each iteration.  No monotonicity is assumed:
    discriminative detector updates do not maximize the likelihood.
    """
    hyper = dict(hyper or {})
    hyper.setdefault("n_threads", n_threads)
    gammas = initialize_assignments(instances, n_states)
    xis = None
    trans = TransitionMatrix.left_right(n_states)
    trace = []
    n_iter = 0
    for it in range(max_iter):
        trans, emissions = m_step(instances, gammas, trans, emissions, negatives, hyper, xis)
        new_gammas, xis, total = e_step(instances, trans, emissions, n_threads)
        delta = float(np.mean(np.abs(np.concatenate(new_gammas) - np.concatenate(gammas))))
        gammas = new_gammas
        trace.append(total)
        n_iter = it + 1
        log.info("iteration %d: log-likelihood %.6f, gamma change %.2e", n_iter, total, delta)
        if delta < tol:
            break
    return trans, emissions, trace, gammas, n_iter


class HmmEventModel(BaseEstimator):
    """Left-right HMM event model with detector state output models.

    Parameters
    ----------
    label : str
        Event name attached to detections.
    n_states : int
        Number of HMM states (poses).
    max_iter, tol : int, float
        EM stops after ``max_iter`` iterations or once the mean absolute
        change in ``gamma`` drops below ``tol``.
    reg : float
        Detector regularization.  It has to be large next to the summed
        sample weights (thousands of frames here): a nearly hard margin
        separates every event frame from background, whatever its weight,
        and all states end up with the same generic detector.
    solver, epochs, batch_size, floor :
        Detector hyperparameters, see :class:`~posehmm.detector.LinearDetector`.
    negatives_ratio : float
        Random negatives sampled per positive event frame.
    prune : float
        Frames with ``gamma`` below this are left out of a state's positives.
    overlap_threshold : float
        Temporal IoU used when learning the detection threshold.
    seed : int
        Seeds negative sampling and detector training.
    n_threads : int
        Worker threads; results do not depend on it.
    """

    def __init__(self, label="event", n_states=5, max_iter=20, tol=1e-3, reg=1000.0,
                 solver="dual", epochs=50, batch_size=64, floor=1e-3, negatives_ratio=10,
                 prune=1e-4,
                 overlap_threshold=0.1, seed=0, n_threads=1):
        self.label = label
        self.n_states = n_states
        self.max_iter = max_iter
        self.tol = tol
        self.reg = reg
        self.solver = solver
        self.epochs = epochs
        self.batch_size = batch_size
        self.floor = floor
        self.negatives_ratio = negatives_ratio
        self.prune = prune
        self.overlap_threshold = overlap_threshold
        self.seed = seed
        self.n_threads = n_threads

    def _hyper(self):
        return dict(reg=self.reg, solver=self.solver, epochs=self.epochs, batch_size=self.batch_size,
                    floor=self.floor, prune=self.prune, seed=self.seed,
                    n_threads=self.n_threads)

    def fit(self, X, negatives=None, frames=None):
        """Train on a list of :class:`TrainingInstance`.

        Negatives are either given as a 2-D descriptor array or sampled from
        ``frames``, ``negatives_ratio`` random patches per event frame.
        """
        instances = list(X)
        if len(instances) < 2:
            raise ValueError("at least 2 training instances are required")
        if self.n_states < 2:
            raise ValueError("n_states must be at least 2")
        if negatives is None:
            if frames is None:
                raise ValueError("either negatives or frames must be given")
            count = int(round(self.negatives_ratio * sum(len(i) for i in instances)))
            negatives = sample_negative_descriptors(frames, count, self.seed, self.n_threads)
        negatives = np.asarray(negatives, dtype=float)

        trans, emissions, trace, gammas, n_iter = run_em(
            instances, self.n_states, DetectorEmissions(), negatives, self._hyper(),
            self.max_iter, self.tol, self.n_threads,
        )
        self.trans_ = trans
        self.detectors_ = emissions.detectors
        self.trace_ = trace
        self.n_iter_ = n_iter
        self.train_gammas_ = gammas
        self.n_features_in_ = negatives.shape[1]
        if not hasattr(self, "threshold_"):
            self.threshold_ = None
        return self

    def _check_fitted(self):
        if not hasattr(self, "trans_"):
            raise NotFittedError("event model is not trained")

    def output_probs(self, X):
        self._check_fitted()
        return DetectorEmissions(self.detectors_).output_probs(X)

    def posterior(self, X):
        self._check_fitted()
        return forward_backward(self.output_probs(X), self.trans_)

    def predict_states(self, X):
        """Posterior argmax state for every frame of one sequence."""
        return np.argmax(self.posterior(X).gamma, axis=1)

    def score_samples(self, X):
        """End-state-enforced log-likelihood of each descriptor sequence."""
        return np.array([self.posterior(seq).log_likelihood for seq in X])

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def learn_threshold(self, tracks, annotations, frames=None, descriptors=None):
        self.threshold_ = learn_detection_threshold(
            self, tracks, annotations, frames, descriptors, self.overlap_threshold, self.n_threads
        )
        return self

    def config(self):
        return {
            "n_states": self.n_states,
            "descriptor": {"patch_size": PATCH_SIZE, "cell_size": CELL_SIZE, "n_bins": N_BINS},
            "detector": {k: v for k, v in self._hyper().items() if k != "n_threads"},
            "negatives_ratio": self.negatives_ratio,
            "max_iter": self.max_iter,
            "tol": self.tol,
            "overlap_threshold": self.overlap_threshold,
        }


def best_threshold(likelihoods, hits, truth, overlap_threshold):
    """Cutoff maximizing F1 over midpoints of sorted likelihoods and +-inf.

    ``hits`` are the candidate intervals matching ``likelihoods``.  Ties go
    to the higher cutoff.  Returns ``(cutoff, f1)``.
    """
    lls = np.asarray(likelihoods, dtype=float)
    vals = np.unique(lls)
    cutoffs = [-np.inf] + list((vals[:-1] + vals[1:]) / 2) + [np.inf]
    best_cut, best_f1 = None, -1.0
    for cut in cutoffs:
        kept = [h for h, ll in zip(hits, lls) if ll >= cut]
        f1 = match_intervals(truth, kept, overlap_threshold).f1
        if f1 >= best_f1:
            best_cut, best_f1 = cut, f1
    return best_cut, best_f1


def learn_detection_threshold(model, tracks, annotations, frames=None, descriptors=None,
                              overlap_threshold=0.1, n_threads=1):
    """Log-likelihood cutoff maximizing F1 on the training videos.

    Infinite optima are replaced by finite values one unit beyond the
    extreme candidate likelihoods.
    """
    truth = [a for a in annotations if a.label == model.label]
    if not truth:
        raise ValueError(f"no training annotations for label {model.label!r}")
    cands = detect_events([model], tracks, frames, descriptors, threshold=-np.inf,
                          n_threads=n_threads)
    if not cands:
        raise NoCandidatesError(f"no candidate intervals for label {model.label!r}")
    lls = [c.log_likelihood for c in cands]
    cut, f1 = best_threshold(lls, [c.to_interval() for c in cands], truth, overlap_threshold)
    log.info("threshold for %s: %.6f (training F1 %.3f)", model.label, cut, f1)
    if cut == -np.inf:
        return float(min(lls) - 1.0)
    if cut == np.inf:
        return float(max(lls) + 1.0)
    return float(cut)


def instances_for_label(label, tracks, annotations, descriptors):
    """Training instances for one label from per-track descriptor tables."""
    by_id = {t.track_id: t for t in tracks}
    out = []
    for a in annotations:
        if a.label != label:
            continue
        track = by_id[a.track_id]
        d = descriptors[a.track_id][a.start - track.start : a.end - track.start]
        out.append(TrainingInstance(track, a.start, a.end, d))
    return out


def train_event_model(instances, frames_for_negatives, label="event", n_states=5, max_iters=20,
                      seed=0, tracks=None, annotations=None, descriptors=None, frames=None,
                      **params):
    """Fit an :class:`HmmEventModel` and, given training tracks, learn its threshold."""
    model = HmmEventModel(label=label, n_states=n_states, max_iter=max_iters, seed=seed, **params)
    model.fit(instances, frames=frames_for_negatives)
    if tracks is not None and annotations is not None:
        frames = frames if frames is not None else frames_for_negatives
        model.learn_threshold(tracks, annotations, frames, descriptors)
    return model


def sample_negative_descriptors(frames, count, seed, n_threads=1):
    patches = sample_negative_patches(frames, count, seed)
    return np.stack(parallel_map(compute_descriptor, patches, n_threads))


def describe_tracks(tracks, frames, n_threads=1):
    return dict(zip([t.track_id for t in tracks],
                    parallel_map(lambda t: track_descriptors(t, frames), tracks, n_threads)))
