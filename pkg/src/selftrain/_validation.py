"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch
from .synthgen import IGNORE


def check_images(X, n_channels=None):
    """Return ``X`` as float64 (N, H, W, Ch). A 3-D array is one channel."""
    X = np.asarray(X)
    if X.dtype.kind not in "fiu":
        raise TypeError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ShapeMismatch(f"expected (N, H, W, Ch) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one image")
    X = X.astype(np.float64, copy=False)
    if not np.isfinite(X).all():
        raise NonFiniteInput("images contain NaN or inf")
    if n_channels is not None and X.shape[-1] != n_channels:
        raise ShapeMismatch(f"expected {n_channels} channels, got {X.shape[-1]}")
    return X


def check_label_maps(y, X, n_classes=None):
    """Return ``y`` as uint8 (N, H, W) matching ``X``; IGNORE is allowed."""
    y = np.asarray(y)
    if y.dtype.kind not in "iu":
        if y.dtype.kind == "f" and np.all(np.mod(y, 1) == 0):
            y = y.astype(np.int64)
        else:
            raise TypeError("label maps must hold integers")
    if y.shape != X.shape[:3]:
        raise ShapeMismatch(f"label shape {y.shape} does not match images {X.shape[:3]}")
    kept = y[y != IGNORE]
    if kept.size and (kept.min() < 0 or (n_classes is not None and kept.max() >= n_classes)):
        raise ValueError("label values out of range")
    if kept.size and kept.max() >= IGNORE:
        raise ValueError("label values out of range")
    return y.astype(np.uint8)


def infer_n_classes(*label_maps):
    top = -1
    for y in label_maps:
        if y is None:
            continue
        kept = y[y != IGNORE]
        if kept.size:
            top = max(top, int(kept.max()))
    if top < 1:
        raise ValueError("need at least two classes in the labels")
    return top + 1
