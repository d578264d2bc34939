"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_output_probs(b):
    b = check_array(b, dtype=np.float64, ensure_2d=True, ensure_min_samples=0)
    if b.shape[0] == 0:
        raise ValueError("empty sequence")
    if np.any(b < 0) or np.any(b > 1):
        raise ValueError("output probabilities must lie in [0, 1]")
    return b


def check_descriptors(X, n_features=None):
    X = check_array(X, dtype=np.float64, ensure_min_samples=0)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(
            f"descriptor length {X.shape[1]} does not match detector length {n_features}"
        )
    return X


def check_box(box):
    x, y, w, h = (int(v) for v in box)
    if w < 1 or h < 1:
        raise ValueError(f"degenerate box {box}")
    return x, y, w, h


def check_seed(seed):
    if seed is None:
        raise ValueError("an explicit seed is required")
    return int(seed)
