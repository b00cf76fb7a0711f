"""Small input-checking helpers shared by the estimators."""
import numpy as np


def check_points(X, dim=None, name="X"):
    """Return a float64 (n, dim) array; a single 1-D point becomes (1, dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"{name} has {X.shape[1]} columns, expected {dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_time(t, lo=0.0, hi=1.0, name="t"):
    t = float(t)
    if not (lo <= t <= hi):
        raise ValueError(f"{name}={t} outside [{lo}, {hi}]")
    return t


def check_positive(value, name):
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_finite(arr, message):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(message)
    return arr
