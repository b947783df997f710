"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array


class InvariantViolation(RuntimeError):
    """Raised when sampler bookkeeping leaves a count structure inconsistent."""


def check_counts(X):
    """Validate a T x V matrix of non-negative integer counts.

    Returns an ``int64`` array. Floats are accepted when they hold integral
    values, so that counts read from CSV via pandas pass through.
    """
    X = check_array(
        X, dtype=None, ensure_2d=True, ensure_min_samples=0, ensure_min_features=0
    )
    if X.dtype.kind == "f":
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("counts must be integers")
    elif X.dtype.kind not in "iu":
        raise ValueError(f"counts must be numeric, got dtype {X.dtype}")
    X = X.astype(np.int64)
    if (X < 0).any():
        raise ValueError("counts must be non-negative")
    return X


def check_features(X, n_features=None):
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(
            f"X has {X.shape[1]} features, but the estimator expects {n_features}"
        )
    return X


def check_targets(Y):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    return check_array(Y, dtype=np.float64, ensure_2d=True)


def check_stochastic_rows(P, atol=1e-6, name="distribution"):
    P = check_array(P, dtype=np.float64, ensure_2d=False)
    if (P < 0).any():
        raise ValueError(f"{name} has negative entries")
    sums = P.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=atol, rtol=0):
        raise ValueError(f"{name} rows must sum to 1 (got {sums.min()}..{sums.max()})")
    return P


def check_positive(name, value, allow_zero=False):
    if value is None or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return value


def normalize_rows(P):
    P = np.asarray(P, dtype=np.float64)
    return P / P.sum(axis=-1, keepdims=True)
