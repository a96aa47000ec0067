"""Dense symmetric-matrix numerics.

Everything here operates on small dense ``numpy`` arrays (dimension well
under 100).  Eigen-decompositions and factorizations are delegated to
LAPACK through ``numpy``/``scipy``; this module adds the input checks,
tolerances and error types the rest of the package relies on.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .errors import InvalidInputError, NotPositiveDefiniteError


@dataclass(frozen=True)
class NumericsConfig:
    """Tolerances used across the package."""

    symmetry_tol: float = 1e-12
    reconstruction_tol: float = 1e-9
    lmi_eig_tol: float = 1e-7
    scalar_tol: float = 1e-8
    gap_tol: float = 1e-7
    kappa_zero: float = 1e-6
    max_newton_steps: int = 200
    max_variables: int = 200
    certificate_tol: float = 1e-6


DEFAULT_NUMERICS = NumericsConfig()


def as_matrix(m, name="matrix"):
    """Return ``m`` as a finite 2-D float array."""
    a = np.asarray(m, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {np.shape(m)}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def as_symmetric(m, tol=DEFAULT_NUMERICS.symmetry_tol, name="matrix"):
    """Validate symmetry (relative to the largest entry) and return the symmetrized copy."""
    a = as_matrix(m, name)
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale:
        raise InvalidInputError(f"{name} is not symmetric")
    return 0.5 * (a + a.T)


def sym_eig(m):
    """Eigen-decomposition of a symmetric matrix.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
        Ascending.
    eigenvectors : ndarray, shape (n, n)
        Orthonormal columns, ``m @ v[:, i] == w[i] * v[:, i]``.
    """
    a = as_symmetric(m)
    w, v = np.linalg.eigh(a)
    return w, v


def min_eig(m):
    return float(sym_eig(m)[0][0])


def max_eig(m):
    return float(sym_eig(m)[0][-1])


def cholesky(m, jitter=0.0):
    """Lower Cholesky factor of ``m + jitter * I``.

    Raises
    ------
    NotPositiveDefiniteError
        With the zero-based index of the failing pivot.
    """
    if jitter < 0:
        raise InvalidInputError("jitter must be nonnegative")
    a = as_symmetric(m)
    if jitter:
        a = a + jitter * np.eye(a.shape[0])
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise InvalidInputError(f"dpotrf rejected argument {-info}")
    return np.tril(c)


def frobenius_norm(m):
    a = as_matrix(m)
    return float(np.sqrt(np.sum(a * a)))


def spectral_radius(m):
    """Largest eigenvalue modulus of a general square matrix."""
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"spectral radius needs a square matrix, got {a.shape}")
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def spectral_norm(m):
    """Largest singular value, computed as sqrt(max_eig(m^T m))."""
    a = as_matrix(m)
    return float(np.sqrt(max(max_eig(a.T @ a), 0.0)))


def observability_matrix(A, C):
    A = as_matrix(A, "A")
    C = as_matrix(C, "C")
    n = A.shape[0]
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


def matrix_rank(m, rtol=1e-10):
    s = np.linalg.svd(as_matrix(m), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def is_observable(A, C):
    return matrix_rank(observability_matrix(A, C)) == np.shape(A)[0]
