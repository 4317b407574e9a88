"""Input validation helpers shared by the estimators and functional ops."""
import numpy as np


class NumericalError(RuntimeError):
    """Raised when an iterative solver produces non-finite values."""


def check_finite(x, name="input"):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")
    return x


def check_power(p, name="power spectrum"):
    """Validate a nonnegative, finite real array and return it as float64."""
    p = check_finite(np.asarray(p, dtype=float), name)
    if np.any(p < 0):
        raise ValueError(f"{name} must be nonnegative")
    return p


def check_hermitian(A, tol=1e-10, name="matrix"):
    A = check_finite(np.asarray(A, dtype=complex), name)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    scale = max(np.max(np.abs(A)), 1.0)
    if np.max(np.abs(A - np.conj(np.swapaxes(A, -1, -2)))) > tol * scale:
        raise ValueError(f"{name} is not Hermitian")
    return A


def hermitize(A):
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
