"""Lipschitz-constant estimates for a learned basis expansion on a box."""

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, UnsupportedError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoxDomain:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidInputError("box bounds must be finite vectors of equal length")
        if not np.all(lo < hi):
            raise InvalidInputError("box needs lower < upper componentwise")
        object.__setattr__(self, "lower", tuple(lo.tolist()))
        object.__setattr__(self, "upper", tuple(hi.tolist()))

    @property
    def dim(self):
        return len(self.lower)

    def grid(self, per_dim):
        axes = [np.linspace(a, b, per_dim) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def corners(self):
        return np.array(list(itertools.product(*zip(self.lower, self.upper))), dtype=float)

    def sample(self, n, rng):
        return rng.uniform(self.lower, self.upper, size=(int(n), self.dim))


def _jac_norms(J, norm):
    """Per-point norms of a stack of Jacobians ``(N, r, c)``."""
    if norm == "frobenius":
        return np.sqrt(np.sum(J * J, axis=(1, 2)))
    if norm == "spectral":
        JtJ = np.einsum("nri,nrj->nij", J, J)
        return np.sqrt(np.maximum(np.linalg.eigvalsh(JtJ)[:, -1], 0.0))
    raise InvalidInputError(f"unknown norm {norm!r}")


def _points(box, grid_per_dim, chunk=200_000):
    pts = np.vstack([box.grid(grid_per_dim), box.corners()])
    for k in range(0, pts.shape[0], chunk):
        yield pts[k:k + chunk]


def max_basis_gradient_norm(basis, box, grid_per_dim=101, norm="spectral"):
    """``max ||d psi / d q||`` over a uniform grid plus the box corners."""
    if grid_per_dim < 2:
        raise InvalidInputError("grid_per_dim must be at least 2")
    if not basis.differentiable:
        raise UnsupportedError("basis is not differentiable")
    return max(float(np.max(_jac_norms(basis.jacobian_batch(q), norm))) for q in _points(box, grid_per_dim))


def analytic_lipschitz_bound(expansion, box, grid_per_dim=101, safety=1.05, norm="spectral"):
    """Upper estimate ``safety * ||p|| * max_q ||d psi / d q||`` of the expansion's Lipschitz constant.

    Parameters
    ----------
    expansion : BasisExpansion
    box : BoxDomain
    grid_per_dim : int
        Grid points per coordinate; the corners are always included.
    safety : float
        Inflation compensating for the grid spacing.
    norm : {"spectral", "frobenius"}
        Jacobian norm; Frobenius is a cheaper upper bound.
    """
    if safety < 1:
        raise InvalidInputError("safety factor must be at least 1")
    g = max_basis_gradient_norm(expansion.basis, box, grid_per_dim, norm)
    return safety * float(np.linalg.norm(expansion.p)) * g


def max_expansion_gradient_norm(expansion, box, grid_per_dim=101, norm="spectral"):
    """``max ||d (Theta psi) / d q||`` on the grid: the expansion's own gradient bound."""
    if not expansion.basis.differentiable:
        raise UnsupportedError("basis is not differentiable")
    return max(float(np.max(_jac_norms(expansion.jacobian_batch(q), norm)))
               for q in _points(box, grid_per_dim))


def sampled_lipschitz_estimate(fn, box, n_pairs=100_000, inflation=1.1, rng=None, vectorized=False):
    """Largest sampled slope ``||fn(q) - fn(q')|| / ||q - q'||`` times ``inflation``.

    Parameters
    ----------
    fn : callable
        Maps a point of the box to a scalar or vector.  With
        ``vectorized=True`` it receives an ``(N, n_q)`` array and returns
        ``(N, ...)``.
    rng : numpy.random.Generator
        Source of the uniformly drawn pairs.
    """
    if n_pairs < 1:
        raise InvalidInputError("n_pairs must be positive")
    if inflation < 1:
        raise InvalidInputError("inflation must be at least 1")
    rng = np.random.default_rng(0) if rng is None else rng
    q1 = box.sample(n_pairs, rng)
    q2 = box.sample(n_pairs, rng)
    if vectorized:
        f1 = np.asarray(fn(q1), dtype=float).reshape(n_pairs, -1)
        f2 = np.asarray(fn(q2), dtype=float).reshape(n_pairs, -1)
    else:
        f1 = np.array([np.ravel(fn(q)) for q in q1], dtype=float)
        f2 = np.array([np.ravel(fn(q)) for q in q2], dtype=float)
    dq = np.linalg.norm(q1 - q2, axis=1)
    ok = dq > 0
    if not np.any(ok):
        raise InvalidInputError("all sampled pairs are degenerate")
    slopes = np.linalg.norm(f1[ok] - f2[ok], axis=1) / dq[ok]
    return inflation * float(np.max(slopes))
