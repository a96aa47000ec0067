"""Discrete-time plant and observer simulation.

Plant::

    x[t+1] = A x[t] + B u[t] + phi(q[t]),   y[t] = C x[t],   q[t] = Cq x[t]

Observer::

    xhat[t+1] = A xhat[t] + B u[t] + phihat(qhat[t]) + L (C xhat[t] - y[t])

where ``phihat = B_phi (Theta psi)`` is a :class:`BasisExpansion`.
"""

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .basis import Basis, vdp_legendre_basis
from .errors import DivergenceError, InvalidInputError
from .lmi import selection_matrix
from .numerics import as_matrix, is_observable

log = logging.getLogger(__name__)

DEFAULT_GUARD = 1e6


class BasisExpansion:
    """Coefficient-weighted basis expansion acting on selected state rows.

    Parameters
    ----------
    basis : Basis
    rows : sequence of int
        State rows receiving the expansion; defines ``B_phi``.
    n_x : int
        State dimension.
    coefficients : array_like
        Flattened ``(len(rows), n_p)`` matrix, row-major.  Defaults to zeros.
    pbar : float
        Bound on the coefficient 2-norm.
    enforce_bound : bool
        Reject coefficients with norm above ``pbar``.  Candidate points of a
        box search may legitimately exceed the 2-norm ball, so callers that
        evaluate such candidates switch this off.
    """

    def __init__(self, basis, rows, n_x, coefficients=None, pbar=1.0, enforce_bound=True):
        self.basis = basis
        self.rows = [int(r) for r in rows]
        self.n_x = int(n_x)
        if not self.rows:
            raise InvalidInputError("expansion needs at least one active row")
        self.B_phi = selection_matrix(self.rows, self.n_x)
        if not (np.isfinite(pbar) and pbar > 0):
            raise InvalidInputError("pbar must be positive")
        self.pbar = float(pbar)
        n = len(self.rows) * basis.n_p
        p = np.zeros(n) if coefficients is None else np.asarray(coefficients, dtype=float).ravel()
        if p.size != n:
            raise InvalidInputError(f"expected {n} coefficients, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("non-finite coefficients")
        if enforce_bound and np.linalg.norm(p) > self.pbar * (1 + 1e-12):
            raise InvalidInputError(f"coefficient norm {np.linalg.norm(p):.4g} exceeds bound {self.pbar:.4g}")
        self.p = p
        self.theta = p.reshape(len(self.rows), basis.n_p)

    @property
    def n_p(self):
        return self.p.size

    def with_coefficients(self, p, enforce_bound=True):
        return BasisExpansion(self.basis, self.rows, self.n_x, p, self.pbar, enforce_bound)

    def eval_basis(self, q):
        return self.basis(q)

    def eval_basis_gradient(self, q):
        return self.basis.jacobian(q)

    def __call__(self, q):
        """State-space vector ``B_phi (Theta psi(q))``."""
        out = np.zeros(self.n_x)
        out[self.rows] = self.theta @ self.basis(q)
        return out

    def eval_batch(self, q):
        out = np.zeros((np.shape(q)[0], self.n_x))
        out[:, self.rows] = self.basis.eval_batch(q) @ self.theta.T
        return out

    def jacobian_batch(self, q):
        """Jacobian of the active outputs w.r.t. q, shape ``(N, n_active, n_q)``."""
        return np.einsum("ap,npq->naq", self.theta, self.basis.jacobian_batch(q))

    def to_dict(self):
        return {"basis": self.basis.to_dict(), "rows": self.rows, "n_x": self.n_x,
                "coefficients": self.p.tolist(), "pbar": self.pbar}

    @classmethod
    def from_dict(cls, d, enforce_bound=True):
        return cls(Basis.from_dict(d["basis"]), d["rows"], d["n_x"], d.get("coefficients"),
                   d.get("pbar", 1.0), enforce_bound)


class SystemModel:
    """Known linear part of the plant plus optional simulation-only nonlinearity."""

    def __init__(self, A, B, C, Cq, true_phi=None, phi_bound=1.0, tau=1.0, check_observable=True):
        self.A = as_matrix(A, "A")
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise InvalidInputError(f"A must be square, got {self.A.shape}")
        B = np.asarray(B, dtype=float)
        if B.size % n:
            raise InvalidInputError(f"B with {B.size} entries does not fit {n} rows")
        self.B = B.reshape(n, -1) if B.size else np.zeros((n, 0))
        self.C = as_matrix(C, "C")
        self.Cq = as_matrix(Cq, "Cq")
        if self.C.shape[1] != n or self.Cq.shape[1] != n or self.B.shape[0] != n:
            raise InvalidInputError("B, C, Cq dimensions do not match A")
        if check_observable and not is_observable(self.A, self.C):
            raise InvalidInputError("(A, C) is not observable")
        if not (phi_bound > 0):
            raise InvalidInputError("phi_bound must be positive")
        self.true_phi = true_phi
        self.phi_bound = float(phi_bound)
        self.tau = float(tau)

    n_x = property(lambda self: self.A.shape[0])
    n_u = property(lambda self: self.B.shape[1])
    n_y = property(lambda self: self.C.shape[0])
    n_q = property(lambda self: self.Cq.shape[0])


@dataclass
class ObserverConfig:
    L: np.ndarray
    expansion: BasisExpansion
    xhat0: np.ndarray


@dataclass
class Trajectory:
    tau: float
    x: np.ndarray
    xhat: np.ndarray
    y: np.ndarray
    u: np.ndarray
    errnorm: np.ndarray

    @property
    def T(self):
        return self.x.shape[0]

    def output_error_energy(self, C, t_star=0):
        r = self.xhat[t_star:] @ np.asarray(C).T - self.y[t_star:]
        return float(np.sum(r * r))

    def to_csv(self, path=None):
        n, m = self.x.shape[1], self.y.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + [f"xhat{i + 1}" for i in range(n)]
                   + [f"y{i + 1}" for i in range(m)] + ["errnorm"])
        for k in range(self.T):
            w.writerow([repr(k * self.tau)] + [repr(float(v)) for v in self.x[k]]
                       + [repr(float(v)) for v in self.xhat[k]] + [repr(float(v)) for v in self.y[k]]
                       + [repr(float(self.errnorm[k]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _inputs(sys, u_seq, T):
    if u_seq is None:
        return np.zeros((T, sys.n_u))
    u = np.asarray(u_seq, dtype=float).reshape(-1, sys.n_u) if sys.n_u else np.zeros((T, 0))
    if u.shape[0] < T:
        raise InvalidInputError(f"need {T} inputs, got {u.shape[0]}")
    return u[:T]


def simulate_plant(sys, x0, u_seq=None, T=1, guard=DEFAULT_GUARD):
    """Simulate ``T`` samples ``x[0..T-1]`` of the true plant.

    Returns
    -------
    x : ndarray, shape (T, n_x)
    y : ndarray, shape (T, n_y)

    Raises
    ------
    DivergenceError
        If the state norm exceeds ``guard`` or becomes non-finite.
    """
    if sys.true_phi is None:
        raise InvalidInputError("plant simulation needs true_phi")
    if T < 1:
        raise InvalidInputError("T must be at least 1")
    u = _inputs(sys, u_seq, T)
    x = np.zeros((T, sys.n_x))
    x[0] = np.asarray(x0, dtype=float).ravel()
    A, B, Cq, phi = sys.A, sys.B, sys.Cq, sys.true_phi
    for t in range(T - 1):
        nxt = A @ x[t] + B @ u[t] + phi(Cq @ x[t])
        nrm = np.linalg.norm(nxt)
        if not (nrm <= guard):
            raise DivergenceError(t + 1, "plant", nrm)
        x[t + 1] = nxt
    return x, x @ sys.C.T


def run_observer(sys, obs, y_seq, u_seq=None, guard=DEFAULT_GUARD):
    """Run the observer on a measured output sequence; returns ``xhat`` of shape ``(T, n_x)``."""
    y = np.asarray(y_seq, dtype=float).reshape(-1, sys.n_y)
    T = y.shape[0]
    u = _inputs(sys, u_seq, T)
    L = np.asarray(obs.L, dtype=float).reshape(sys.n_x, sys.n_y)
    exp = obs.expansion
    A, B, C, Cq = sys.A, sys.B, sys.C, sys.Cq
    rows, theta, basis = exp.rows, exp.theta, exp.basis
    xh = np.zeros((T, sys.n_x))
    xh[0] = np.asarray(obs.xhat0, dtype=float).ravel()
    for t in range(T - 1):
        nxt = A @ xh[t] + B @ u[t] + L @ (C @ xh[t] - y[t])
        nxt[rows] += theta @ basis(Cq @ xh[t])
        nrm = np.linalg.norm(nxt)
        if not (nrm <= guard):
            raise DivergenceError(t + 1, "observer", nrm)
        xh[t + 1] = nxt
    return xh


def simulate(sys, obs, x0, T, u_seq=None, guard=DEFAULT_GUARD, plant=None):
    """Joint plant + observer run; ``plant`` may supply a precomputed ``(x, y)``."""
    u = _inputs(sys, u_seq, T)
    x, y = plant if plant is not None else simulate_plant(sys, x0, u, T, guard)
    xh = run_observer(sys, obs, y[:T], u, guard)
    x = x[:T]
    return Trajectory(sys.tau, x, xh, y[:T], u, np.linalg.norm(xh - x, axis=1))


def compute_reward(y_seq, yhat_seq, p, anchor, W1, W2, T_ell=None, t_star=0):
    """Negative weighted output-error energy plus coefficient penalty.

    ``-( sum_{t=t_star}^{T_ell-1} ||yhat_t - y_t||^2_{W1} + ||p - anchor||^2_{W2} / T_ell )``.
    Scalars ``W1``/``W2`` are read as multiples of the identity.
    """
    y = np.atleast_2d(np.asarray(y_seq, dtype=float))
    yh = np.atleast_2d(np.asarray(yhat_seq, dtype=float))
    if y.shape[0] == 1 and y.shape[1] != 1 and np.ndim(y_seq) == 1:
        y, yh = y.T, yh.T
    if y.shape != yh.shape:
        raise InvalidInputError(f"output shapes differ: {y.shape} vs {yh.shape}")
    T_ell = y.shape[0] if T_ell is None else int(T_ell)
    if T_ell > y.shape[0] or T_ell < 1:
        raise InvalidInputError(f"T_ell={T_ell} outside 1..{y.shape[0]}")
    if not 0 <= t_star < T_ell:
        raise InvalidInputError("need 0 <= t_star < T_ell")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    a = np.broadcast_to(np.asarray(anchor, dtype=float), p.shape)
    ny = y.shape[1]
    W1 = np.eye(ny) * W1 if np.ndim(W1) == 0 else np.asarray(W1, dtype=float)
    W2 = np.eye(p.size) * W2 if np.ndim(W2) == 0 else np.asarray(W2, dtype=float)
    if W1.shape != (ny, ny) or W2.shape != (p.size, p.size):
        raise InvalidInputError("weight matrix dimensions do not match")
    if np.linalg.eigvalsh(0.5 * (W1 + W1.T))[0] <= 0:
        raise InvalidInputError("W1 must be positive definite")
    if np.linalg.eigvalsh(0.5 * (W2 + W2.T))[0] < -1e-12:
        raise InvalidInputError("W2 must be positive semidefinite")
    r = yh[t_star:T_ell] - y[t_star:T_ell]
    energy = float(np.einsum("ti,ij,tj->", r, W1, r))
    d = p - a
    return -(energy + float(d @ W2 @ d) / T_ell)


def van_der_pol_model(tau=0.01, pbar=1e-2):
    """Euler-discretized Van der Pol benchmark.

    Returns
    -------
    sys : SystemModel
        With ``true_phi(q) = (0, -tau q1^2 q2)``.
    expansion : BasisExpansion
        Legendre-type basis on the second state row, zero coefficients.
    """
    if not 0 < tau <= 0.1:
        raise InvalidInputError("tau must lie in (0, 0.1]")
    A = np.array([[1.0, tau], [tau, 1.0 - tau]])
    B = np.array([[0.0], [-tau]])
    C = np.array([[1.0, 0.0]])
    Cq = np.eye(2)

    def true_phi(q):
        return np.array([0.0, -tau * q[0] ** 2 * q[1]])

    sys = SystemModel(A, B, C, Cq, true_phi=true_phi, tau=tau)
    return sys, BasisExpansion(vdp_legendre_basis(), [1], 2, None, pbar)
