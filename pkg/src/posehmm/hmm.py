"""Log-space inference for left-right HMMs with an absorbing end state.

Output probabilities are supplied as a ``(T, n)`` matrix, so any state output
model (detector scores, emission tables) can drive the same recursions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._validation import check_output_probs

# log(0) is stored as a large negative constant so every table stays finite.
LOG_ZERO = -1e30


class ImpossibleSequenceError(ValueError):
    pass


def safe_log(x):
    """Elementwise log with ``LOG_ZERO`` for non-positive entries."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, LOG_ZERO)
    pos = x > 0
    out[pos] = np.log(x[pos])
    return out if out.ndim else float(out)


def logsumexp(a, axis=None):
    """log-sum-exp that treats ``LOG_ZERO`` entries as exact zeros."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(m <= LOG_ZERO, 0.0, m)
    with np.errstate(under="ignore"):
        s = np.sum(np.exp(a - m_safe), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.where(m <= LOG_ZERO, LOG_ZERO, m_safe + np.log(s))
    out = np.maximum(out, LOG_ZERO)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


@dataclass
class TransitionMatrix:
    """Bi-diagonal transition probabilities plus exit mass into the end state.

    Row ``i`` satisfies ``probs[i].sum() + end_prob[i] == 1``; only the last
    state may exit.
    """

    probs: np.ndarray
    end_prob: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.end_prob = np.asarray(self.end_prob, dtype=float)

    @property
    def n_states(self):
        return self.probs.shape[0]

    @classmethod
    def left_right(cls, n_states, stay=0.5, exit_prob=None):
        """Uniform left-right chain: each state stays with prob ``stay``."""
        if n_states < 1:
            raise ValueError("n_states must be positive")
        exit_prob = 1.0 - stay if exit_prob is None else exit_prob
        probs = np.zeros((n_states, n_states))
        for i in range(n_states - 1):
            probs[i, i] = stay
            probs[i, i + 1] = 1.0 - stay
        probs[-1, -1] = 1.0 - exit_prob
        end = np.zeros(n_states)
        end[-1] = exit_prob
        return cls(probs, end)

    def validate(self, atol=1e-9):
        n = self.n_states
        if self.probs.shape != (n, n) or self.end_prob.shape != (n,):
            raise ValueError("transition matrix has inconsistent shape")
        if np.any(self.probs < 0) or np.any(self.end_prob < 0):
            raise ValueError("negative transition probability")
        off = ~bidiagonal_mask(n)
        if np.any(self.probs[off] != 0):
            raise ValueError("transition support is not bi-diagonal")
        if np.any(self.end_prob[:-1] != 0) or not self.end_prob[-1] > 0:
            raise ValueError("only the last state may exit, with positive mass")
        rows = self.probs.sum(axis=1) + self.end_prob
        if np.any(np.abs(rows - 1.0) > atol):
            raise ValueError("transition rows do not sum to 1")
        return self

    def copy(self):
        return TransitionMatrix(self.probs.copy(), self.end_prob.copy())


def bidiagonal_mask(n):
    return np.eye(n, dtype=bool) | np.eye(n, k=1, dtype=bool)


def default_initial(n_states):
    init = np.zeros(n_states)
    init[0] = 1.0
    return init


def _check_dims(output_probs, trans, initial=None):
    b = check_output_probs(output_probs)
    if b.shape[1] != trans.n_states:
        raise ValueError(
            f"output probs have {b.shape[1]} states, transitions have {trans.n_states}"
        )
    if initial is not None:
        initial = np.asarray(initial, dtype=float)
        if initial.shape != (trans.n_states,):
            raise ValueError("initial distribution has wrong length")
        if abs(initial.sum() - 1.0) > 1e-9:
            raise ValueError("initial distribution must sum to 1")
    return b, initial


def forward(output_probs, trans, initial=None):
    """Return ``log_alpha`` with ``log_alpha[t, j] = log P(O_0..O_t, X_t = j)``."""
    if initial is None:
        initial = default_initial(trans.n_states)
    b, initial = _check_dims(output_probs, trans, initial)
    log_b = safe_log(b)
    log_a = safe_log(trans.probs)
    T, n = b.shape
    log_alpha = np.empty((T, n))
    log_alpha[0] = np.maximum(safe_log(initial) + log_b[0], LOG_ZERO)
    for t in range(1, T):
        log_alpha[t] = logsumexp(log_alpha[t - 1][:, None] + log_a, axis=0) + log_b[t]
        np.maximum(log_alpha[t], LOG_ZERO, out=log_alpha[t])
    return log_alpha


def backward(output_probs, trans):
    """Return ``log_beta``; the last row is the exit mass into the end state."""
    b, _ = _check_dims(output_probs, trans)
    log_b = safe_log(b)
    log_a = safe_log(trans.probs)
    T, n = b.shape
    log_beta = np.empty((T, n))
    log_beta[T - 1] = safe_log(trans.end_prob)
    for t in range(T - 2, -1, -1):
        log_beta[t] = logsumexp(log_a + (log_b[t + 1] + log_beta[t + 1])[None, :], axis=1)
        np.maximum(log_beta[t], LOG_ZERO, out=log_beta[t])
    return log_beta


@dataclass
class PosteriorTables:
    log_alpha: np.ndarray
    log_beta: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    log_likelihood: float


def sequence_log_likelihood(log_alpha, trans):
    """End-state-enforced log-likelihood from the final forward row."""
    return logsumexp(log_alpha[-1] + safe_log(trans.end_prob))


def posteriors(log_alpha, log_beta, output_probs, trans):
    """State and transition posteriors from forward/backward tables."""
    b, _ = _check_dims(output_probs, trans)
    if log_alpha.shape != b.shape or log_beta.shape != b.shape:
        raise ValueError("forward/backward tables do not match output probs")
    log_lik = sequence_log_likelihood(log_alpha, trans)
    if log_lik <= LOG_ZERO / 2:
        raise ImpossibleSequenceError("impossible sequence")

    with np.errstate(under="ignore"):
        gamma = np.exp(log_alpha + log_beta - log_lik)
    gamma /= gamma.sum(axis=1, keepdims=True)

    T, n = b.shape
    log_a = safe_log(trans.probs)
    log_b = safe_log(b)
    if T > 1:
        log_xi = (
            log_alpha[:-1, :, None]
            + log_a[None, :, :]
            + (log_b[1:] + log_beta[1:])[:, None, :]
            - log_lik
        )
        with np.errstate(under="ignore"):
            xi = np.exp(np.maximum(log_xi, LOG_ZERO))
        xi /= xi.sum(axis=(1, 2), keepdims=True)
    else:
        xi = np.zeros((0, n, n))
    return PosteriorTables(log_alpha, log_beta, gamma, xi, log_lik)


def forward_backward(output_probs, trans, initial=None):
    log_alpha = forward(output_probs, trans, initial)
    log_beta = backward(output_probs, trans)
    return posteriors(log_alpha, log_beta, output_probs, trans)


def update_transitions(xi_sum, exit_counts, prev=None):
    """Re-estimate transitions from pooled expected counts.

    Parameters
    ----------
    xi_sum : (n, n) array
        ``xi`` summed over frames and sequences (in a fixed order by the caller).
    exit_counts : (n,) array
        Summed final-frame ``gamma`` per state; each sequence exits once.
    prev : TransitionMatrix, optional
        Rows with no expected mass keep their previous values.
    """
    xi_sum = np.asarray(xi_sum, dtype=float)
    n = xi_sum.shape[0]
    if xi_sum.shape != (n, n):
        raise ValueError("xi_sum must be square")
    exit_counts = np.zeros(n) if exit_counts is None else np.asarray(exit_counts, float)
    if prev is None:
        prev = TransitionMatrix.left_right(n)

    counts = np.where(bidiagonal_mask(n), xi_sum, 0.0)
    exits = np.zeros(n)
    exits[-1] = exit_counts[-1]
    probs = prev.probs.copy()
    end = prev.end_prob.copy()
    for i in range(n):
        total = counts[i].sum() + exits[i]
        if total > 0:
            probs[i] = counts[i] / total
            end[i] = exits[i] / total
    if not end[-1] > 0:
        # no observed exit: keep the previous last row to stay feasible
        probs[-1] = prev.probs[-1]
        end[-1] = prev.end_prob[-1]
    return TransitionMatrix(probs, end)


def enumerate_likelihood_oracle(output_probs, trans, initial=None, max_paths=10**7):
    """Exact log-likelihood by summing over every state path (test oracle)."""
    if initial is None:
        initial = default_initial(trans.n_states)
    b, initial = _check_dims(output_probs, trans, initial)
    T, n = b.shape
    if n**T > max_paths:
        raise ValueError(f"instance too large to enumerate: {n}^{T} paths")
    total = 0.0
    for path in itertools.product(range(n), repeat=T):
        p = initial[path[0]] * b[0, path[0]]
        for t in range(1, T):
            if p == 0.0:
                break
            p *= trans.probs[path[t - 1], path[t]] * b[t, path[t]]
        total += p * trans.end_prob[path[-1]]
    return float(np.log(total)) if total > 0 else LOG_ZERO


def enumerate_posterior_oracle(output_probs, trans, initial=None):
    """Per-frame state posteriors by path enumeration (test oracle)."""
    if initial is None:
        initial = default_initial(trans.n_states)
    b, initial = _check_dims(output_probs, trans, initial)
    T, n = b.shape
    gamma = np.zeros((T, n))
    for path in itertools.product(range(n), repeat=T):
        p = initial[path[0]] * b[0, path[0]]
        for t in range(1, T):
            p *= trans.probs[path[t - 1], path[t]] * b[t, path[t]]
        p *= trans.end_prob[path[-1]]
        for t, s in enumerate(path):
            gamma[t, s] += p
    return gamma / gamma.sum(axis=1, keepdims=True)
