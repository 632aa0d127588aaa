"""Input checks shared by the estimators and the functional API."""

import numpy as np


def check_images(X, name="X", dtype=np.float32, copy=False):
    """Validate an (n, c, h, w) image batch with values in [0, 1]."""
    X = np.array(X, dtype=dtype, copy=copy) if copy else np.asarray(X, dtype=dtype)
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n, c, h, w), got {X.shape}")
    if X.size and not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError(f"{name} pixel values must lie in [0, 1]")
    return X


def check_labels(y, n, k=None, name="y"):
    """Validate integer labels of length ``n``; infer ``k`` when not given."""
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {y.shape}")
    if n and not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError(f"{name} must contain integer class ids")
    y = y.astype(np.int64)
    if n and y.min() < 0:
        raise ValueError(f"{name} must be non-negative")
    if k is None:
        k = int(y.max()) + 1 if n else 0
    elif n and y.max() >= k:
        raise ValueError(f"{name} must lie in [0, {k})")
    return y, k
