"""Argument checks shared by the estimator, the ablation harness and the CLI."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_is_fitted  # noqa: F401  (re-exported)


def check_seeds(seeds, minimum=1):
    if isinstance(seeds, numbers.Integral):
        seeds = [seeds]
    seeds = [int(s) for s in seeds]
    if len(seeds) < minimum:
        raise ValueError(f"need at least {minimum} seed(s), got {len(seeds)}")
    if any(s < 0 for s in seeds):
        raise ValueError("seeds must be non-negative")
    return seeds


def check_frames(frames, n_frames=None, frame_dim=None):
    """Finite ``(n, F, C)`` array with optional shape requirements."""
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 3:
        raise ValueError(f"expected (n, frames, channels), got shape {frames.shape}")
    if n_frames is not None and frames.shape[1] != n_frames:
        raise ValueError(f"sequences have {frames.shape[1]} frames, expected {n_frames}")
    if frame_dim is not None and frames.shape[2] != frame_dim:
        raise ValueError(f"frames have {frames.shape[2]} channels, expected {frame_dim}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("sequences contain NaN or inf")
    return frames


def check_positive_int(value, name):
    if not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
