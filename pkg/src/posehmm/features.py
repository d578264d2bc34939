"""Patch extraction and gradient-orientation descriptors.

A descriptor is a single-scale histogram of oriented gradients over a
canonical 64x64 patch: 8x8-pixel cells, 9 unsigned orientation bins with
linear interpolation between neighbouring bins, and per-cell L2
normalization.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

PATCH_SIZE = 64
CELL_SIZE = 8
N_BINS = 9
NORM_EPS = 1e-6
MIN_NEGATIVE_SIZE = 16


def descriptor_length(patch_size=PATCH_SIZE, cell_size=CELL_SIZE, n_bins=N_BINS):
    cells = patch_size // cell_size
    return cells * cells * n_bins


def extract_patch(frame, box, size=PATCH_SIZE):
    """Resample the region ``box = (x, y, w, h)`` of ``frame`` to ``size x size``.

    Sampling is bilinear at pixel centres; samples falling outside the frame
    replicate the nearest edge pixel.
    """
    frame = np.asarray(frame, dtype=float)
    H, W = frame.shape
    x, y, w, h = (float(v) for v in box)
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, float(W)), min(y + h, float(H))
    if w <= 0 or h <= 0 or x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {tuple(box)} is empty after clipping to {W}x{H} frame")

    xs = x + (np.arange(size) + 0.5) * (w / size) - 0.5
    ys = y + (np.arange(size) + 0.5) * (h / size) - 0.5
    xs = np.clip(xs, 0.0, W - 1.0)
    ys = np.clip(ys, 0.0, H - 1.0)
    xi = np.minimum(np.floor(xs).astype(int), W - 2) if W > 1 else np.zeros(size, int)
    yi = np.minimum(np.floor(ys).astype(int), H - 2) if H > 1 else np.zeros(size, int)
    fx = xs - xi
    fy = ys - yi
    xj = np.minimum(xi + 1, W - 1)
    yj = np.minimum(yi + 1, H - 1)

    top = frame[yi][:, xi] * (1 - fx) + frame[yi][:, xj] * fx
    bot = frame[yj][:, xi] * (1 - fx) + frame[yj][:, xj] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def _gradients(patch):
    padded = np.pad(patch, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    return gx, gy


def compute_descriptor(patch, cell_size=CELL_SIZE, n_bins=N_BINS):
    """Gradient-orientation histogram of a square patch, flattened cell-major."""
    patch = np.asarray(patch, dtype=float)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1] or patch.shape[0] % cell_size:
        raise ValueError(f"patch must be square with side divisible by {cell_size}")
    gx, gy = _gradients(patch)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)

    # bin k is centred at k * pi / n_bins; orientations wrap around at pi
    pos = theta / (np.pi / n_bins)
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    lo %= n_bins
    hi = (lo + 1) % n_bins

    cells = patch.shape[0] // cell_size
    rows, cols = np.indices(patch.shape)
    cell_idx = (rows // cell_size) * cells + (cols // cell_size)
    hist = np.zeros(cells * cells * n_bins)
    np.add.at(hist, cell_idx * n_bins + lo, mag * (1 - frac))
    np.add.at(hist, cell_idx * n_bins + hi, mag * frac)

    hist = hist.reshape(cells * cells, n_bins)
    norms = np.sqrt(np.sum(hist**2, axis=1, keepdims=True))
    hist = np.clip(hist / (norms + NORM_EPS), 0.0, 1.0)
    return hist.ravel()


def describe(frame, box):
    return compute_descriptor(extract_patch(frame, box))


def sample_negative_patches(frames, count, seed, size=PATCH_SIZE):
    """Random patches from random frames; deterministic per ``(seed, index)``."""
    if count <= 0:
        return []
    if len(frames) == 0:
        raise ValueError("no frames to sample negatives from")
    patches = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        frame = frames[int(rng.integers(len(frames)))]
        H, W = np.shape(frame)
        w = int(rng.integers(min(MIN_NEGATIVE_SIZE, W), W + 1))
        h = int(rng.integers(min(MIN_NEGATIVE_SIZE, H), H + 1))
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        patches.append(extract_patch(frame, (x, y, w, h), size))
    return patches


class HogTransformer(TransformerMixin, BaseEstimator):
    """Map ``(n, size, size)`` patches to ``(n, descriptor_length)`` descriptors."""

    def __init__(self, cell_size=CELL_SIZE, n_bins=N_BINS):
        self.cell_size = cell_size
        self.n_bins = n_bins

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        return np.stack([compute_descriptor(p, self.cell_size, self.n_bins) for p in X])
