"""Input validation helpers shared by the solvers and estimator wrappers."""

import numbers

import numpy as np

from .exceptions import DimensionMismatch

SYMMETRY_RTOL = 1e-12


def check_vector(x, name="x", size=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {x.shape}")
    if size is not None and x.shape[0] != size:
        raise DimensionMismatch(f"{name} must have length {size}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_alpha(alpha, L):
    """Return ``alpha`` as a float vector of length L; None means e_L."""
    if alpha is None:
        alpha = np.zeros(L)
        alpha[-1] = 1.0
        return alpha
    alpha = check_vector(alpha, "alpha", L)
    if not np.any(alpha):
        raise ValueError("alpha must be non-zero")
    return alpha


def check_square(a, name="matrix", size=None, symmetric=True):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be a square matrix, got shape {a.shape}")
    if size is not None and a.shape[0] != size:
        raise DimensionMismatch(f"{name} must be {size}x{size}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    if symmetric:
        scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
        if np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * scale:
            raise ValueError(f"{name} is not symmetric")
    return a


def check_positive_int(value, name, minimum=1):
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, numbers.Integral):
        if isinstance(value, numbers.Real) and float(value).is_integer():
            value = int(value)
        else:
            raise TypeError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_samples(x, name="samples", minimum=1):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        raise DimensionMismatch(f"{name} must have a sample axis")
    if x.shape[0] < minimum:
        raise ValueError(f"{name} needs at least {minimum} samples, got {x.shape[0]}")
    return x
