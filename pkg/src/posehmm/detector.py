"""Linear appearance detector trained with a sample-weighted hinge loss.

The detector minimizes::

    reg / 2 * ||w||^2 + sum_i weight_i * max(0, 1 - y_i * (w . x_i + b))

and maps raw scores to ``[floor, 1]`` using the range of raw scores seen on
its (positive) training samples, so the result can serve as an HMM state
output probability.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning, NotFittedError
from sklearn.svm import LinearSVC

from ._validation import check_descriptors


class DegenerateTrainingSetError(ValueError):
    pass


class DegenerateCalibrationError(ValueError):
    pass


@dataclass
class WeightedSample:
    descriptor: np.ndarray
    label: int
    weight: float = 1.0


def hinge_objective(w, b, X, y, sample_weight, reg):
    margins = 1.0 - y * (X @ w + b)
    return 0.5 * reg * float(w @ w) + float(np.sum(sample_weight * np.maximum(margins, 0.0)))


def hinge_subgradient(w, b, X, y, sample_weight, reg):
    """Subgradient ``(d/dw, d/db)`` of :func:`hinge_objective`.

    At a kink (margin exactly 1) the zero element of the subdifferential
    is taken.
    """
    active = (1.0 - y * (X @ w + b)) > 0
    coef = -(sample_weight * y)[active]
    return reg * w + coef @ X[active], float(coef.sum())


def optimal_bias(scores, y, sample_weight):
    """Exact minimizer over ``b`` of the weighted hinge loss for fixed scores.

    The loss is piecewise linear in ``b`` with a breakpoint at ``y_i - s_i``
    for every sample, and its slope rises by ``weight_i`` at each breakpoint
    starting from ``-sum(positive weights)``.  The minimizer is therefore a
    weighted quantile of the breakpoints.
    """
    knots = y - scores
    order = np.argsort(knots, kind="stable")
    need = float(np.sum(sample_weight[y > 0]))
    cum = np.cumsum(sample_weight[order])
    k = int(np.searchsorted(cum, need, side="left"))
    return float(knots[order[min(k, len(order) - 1)]])


def _pegasos(X, y, sw, reg, epochs, batch_size, seed):
    """Mini-batch subgradient descent with step ``1 / (reg * t)``.

    Returns candidate ``(w, b)`` pairs: the iterate at the end of every epoch
    and the average of the second half of them.  The bias is not updated by
    the steps; after each epoch it is set exactly for the current weights.
    """
    m, d = X.shape
    rng = np.random.default_rng(seed)
    # the optimum satisfies reg/2 ||w||^2 <= objective at zero
    radius = np.sqrt(2.0 * float(sw.sum()) / reg)
    w = np.zeros(d)
    b = optimal_bias(np.zeros(m), y, sw)
    w_avg = np.zeros(d)
    n_avg = 0
    avg_from = epochs // 2
    candidates = []
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(m)
        for start in range(0, m, batch_size):
            idx = order[start : start + batch_size]
            t += 1
            Xb, yb, sb = X[idx], y[idx], sw[idx]
            active = yb * (Xb @ w + b) < 1.0
            coef = (sb * yb)[active] * (m / len(idx))
            eta = 1.0 / (reg * t)
            w = (1.0 - eta * reg) * w + eta * (coef @ Xb[active])
            norm = np.sqrt(w @ w)
            if norm > radius:
                w *= radius / norm
        b = optimal_bias(X @ w, y, sw)
        candidates.append((w.copy(), b))
        if epoch >= avg_from:
            n_avg += 1
            w_avg += (w - w_avg) / n_avg
    if n_avg:
        candidates.append((w_avg, optimal_bias(X @ w_avg, y, sw)))
    return candidates


# constant bias feature inside liblinear; large values weaken its bias penalty
INTERCEPT_SCALING = 10.0
# liblinear draws its coordinate order from one process-wide generator, so
# concurrent fits would interleave draws and lose determinism
_LIBLINEAR_LOCK = threading.Lock()


def _solve_dual(X, y, sw, reg, max_iter, tol, seed):
    """Dual coordinate descent (liblinear) on the bias-augmented problem.

    liblinear regularizes the bias as an extra feature; the bias is then
    re-optimized exactly for the returned weights.
    """
    svc = LinearSVC(C=1.0 / reg, loss="hinge", dual=True, tol=tol, max_iter=max_iter,
                    intercept_scaling=INTERCEPT_SCALING, random_state=seed)
    with _LIBLINEAR_LOCK, warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        svc.fit(X, y, sample_weight=sw)
    w = svc.coef_.ravel().copy()
    return [(w, optimal_bias(X @ w, y, sw))]


class LinearDetector(ClassifierMixin, BaseEstimator):
    """Weighted linear SVM with min-max score calibration.

    Parameters
    ----------
    reg : float
        L2 regularization strength on the weight vector (the bias is free).
    solver : {"dual", "subgradient"}
        ``dual`` runs liblinear's dual coordinate descent; ``subgradient``
        runs mini-batch subgradient descent with step ``1 / (reg * t)``.
        Either way the bias is set exactly for the final weights and the
        zero model is kept if it scores a lower objective.
    max_iter, tol : int, float
        Passes and stopping tolerance of the dual solver.
    epochs, batch_size : int
        Passes and samples per step of the subgradient solver.
    seed : int
        Seeds the sample order; training is a pure function of it.
    floor : float
        Lower clamp for normalized scores, keeping them strictly positive.
    calibrate_on : {"positive", "all"}
        Which training samples define the calibration range.
    """

    def __init__(self, reg=0.01, solver="dual", max_iter=1000, tol=1e-4, epochs=50,
                 batch_size=64, seed=0, floor=1e-3, calibrate_on="positive"):
        self.reg = reg
        self.solver = solver
        self.max_iter = max_iter
        self.tol = tol
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.floor = floor
        self.calibrate_on = calibrate_on

    def fit(self, X, y, sample_weight=None):
        X = check_descriptors(X)
        y = np.where(np.asarray(y) > 0, 1.0, -1.0)
        sw = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight, float)
        if len(y) != len(X) or len(sw) != len(X):
            raise ValueError("X, y and sample_weight lengths differ")
        if np.any(~np.isfinite(sw)) or np.any(sw < 0):
            raise ValueError("sample weights must be finite and non-negative")
        if not self.reg > 0:
            raise ValueError("reg must be positive")
        if not 0 < self.floor < 1:
            raise ValueError("floor must lie in (0, 1)")

        # zero-weight samples carry no loss and no subgradient; dropping them
        # first keeps the shuffle independent of their presence
        keep = sw > 0
        X, y, sw = X[keep], y[keep], sw[keep]
        if not (np.any(y > 0) and np.any(y < 0)):
            raise DegenerateTrainingSetError("degenerate training set")

        self.classes_ = np.array([-1, 1])
        self.n_features_in_ = X.shape[1]
        best = (np.zeros(X.shape[1]), 0.0)
        best_obj = hinge_objective(best[0], best[1], X, y, sw, self.reg)
        if self.solver == "dual":
            cands = _solve_dual(X, y, sw, self.reg, self.max_iter, self.tol, self.seed)
        elif self.solver == "subgradient":
            cands = _pegasos(X, y, sw, self.reg, self.epochs, self.batch_size, self.seed)
        else:
            raise ValueError(f"unknown solver {self.solver!r}")
        for w, b in cands:
            obj = hinge_objective(w, b, X, y, sw, self.reg)
            if obj < best_obj:
                best, best_obj = (w, b), obj
        self.coef_ = best[0]
        self.intercept_ = float(best[1])
        self.objective_ = best_obj

        calib = X[y > 0] if self.calibrate_on == "positive" else X
        self.calibrate(calib)
        return self

    def decision_function(self, X):
        if not hasattr(self, "coef_"):
            raise NotFittedError("detector has no weights")
        X = check_descriptors(X, len(self.coef_))
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, 1, -1)

    def calibrate(self, X):
        scores = self.decision_function(X)
        if len(scores) < 2 or scores.min() == scores.max():
            raise DegenerateCalibrationError("degenerate calibration")
        self.score_min_ = float(scores.min())
        self.score_max_ = float(scores.max())
        return self

    def normalized_score(self, X):
        """Calibrated score in ``[floor, 1]``; nondecreasing in the raw score."""
        if not hasattr(self, "score_min_"):
            raise NotFittedError("detector is not calibrated")
        raw = self.decision_function(X)
        z = (raw - self.score_min_) / (self.score_max_ - self.score_min_)
        return np.clip(z, self.floor, 1.0)

    def objective(self, X, y, sample_weight):
        y = np.where(np.asarray(y) > 0, 1.0, -1.0)
        return hinge_objective(self.coef_, self.intercept_, check_descriptors(X), y,
                               np.asarray(sample_weight, float), self.reg)


def train_weighted(samples, reg=0.01, epochs=50, seed=0, **kwargs):
    """Fit a :class:`LinearDetector` on a list of :class:`WeightedSample`.

    ``epochs`` only applies to the subgradient solver.
    """
    if not samples:
        raise DegenerateTrainingSetError("degenerate training set")
    X = np.stack([np.asarray(s.descriptor, float) for s in samples])
    y = np.array([s.label for s in samples])
    sw = np.array([s.weight for s in samples], dtype=float)
    return LinearDetector(reg=reg, epochs=epochs, seed=seed, **kwargs).fit(X, y, sw)


def raw_score(det, d):
    return float(det.decision_function(np.atleast_2d(d))[0])


def calibrate_range(det, descriptors):
    return det.calibrate(np.atleast_2d(descriptors))


def normalized_score(det, d):
    return float(det.normalized_score(np.atleast_2d(d))[0])
