"""Input validation helpers for the array-facing estimator API."""

from __future__ import annotations

import numpy as np

from .tensor import check_finite

DOMAINS = ("shop", "consumer")


def check_image_batch(X, name: str = "X") -> np.ndarray:
    """Coerce to (n_samples, channels, height, width) float32, all finite."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(
            f"{name} must be a 4-d array (n_samples, channels, height, width), "
            f"got shape {X.shape}")
    if X.shape[0] < 1 or min(X.shape[1:]) < 1:
        raise ValueError(f"{name} has an empty dimension: {X.shape}")
    X = X.astype(np.float32, copy=False)
    check_finite(X, name)
    return np.ascontiguousarray(X)


def check_mask_batch(masks, X: np.ndarray, name: str = "masks") -> np.ndarray:
    """Coerce to (n_samples, 1, height, width) float32 in [0, 1], matching X."""
    masks = np.asarray(masks)
    if masks.ndim == 3:
        masks = masks[:, None, :, :]
    if masks.ndim != 4 or masks.shape[1] != 1:
        raise ValueError(f"{name} must be (n_samples, 1, height, width), got {masks.shape}")
    if masks.shape[0] != X.shape[0] or masks.shape[2:] != X.shape[2:]:
        raise ValueError(f"{name} shape {masks.shape} does not match images {X.shape}")
    masks = masks.astype(np.float32, copy=False)
    check_finite(masks, name)
    if masks.min() < 0.0 or masks.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.ascontiguousarray(masks)


def check_labels(y, n_samples: int) -> list[str]:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"y must be 1-d with {n_samples} entries, got shape {y.shape}")
    return [str(v) for v in y]


def check_domains(domains, n_samples: int) -> list[str]:
    domains = np.asarray(domains)
    if domains.ndim != 1 or domains.shape[0] != n_samples:
        raise ValueError(f"domains must be 1-d with {n_samples} entries, got {domains.shape}")
    out = [str(v) for v in domains]
    bad = sorted(set(out) - set(DOMAINS))
    if bad:
        raise ValueError(f"domains must be 'shop' or 'consumer', got {bad}")
    return out
