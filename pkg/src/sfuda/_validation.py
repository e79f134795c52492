"""Input validation helpers shared by the estimators and functional ops."""

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value."""


def check_images(x, name="images", copy=False):
    """Return ``x`` as a float32 array of shape (n, W, H, C) with values in [0, 1]."""
    x = np.array(x, dtype=np.float32, copy=copy) if copy else np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"{name} must have shape (n, W, H, C), got {x.shape}")
    if min(x.shape[1:]) <= 0:
        raise ValueError(f"{name} has a non-positive spatial/channel dimension: {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return x


def check_labels(y, n, num_classes, name="labels"):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"{name} must be a 1-d array of length {n}, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"{name} must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"{name} must lie in [0, {num_classes})")
    return y


def check_confidences(p, atol=1e-4, name="confidences"):
    """Row-stochastic (n, K) matrix as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty (n, K) matrix, got {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    row_sums = p.sum(axis=1)
    if np.any(row_sums == 0):
        raise ValueError(f"{name} has an all-zero row")
    if np.any(np.abs(row_sums - 1.0) > atol):
        raise ValueError(f"{name} rows must sum to 1 (atol={atol})")
    return p


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def check_positive(value, name):
    if not value > 0:
        raise ConfigError(f"{name} must be > 0, got {value}")
    return value
