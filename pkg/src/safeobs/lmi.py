"""Observer gain synthesis by semidefinite programming.

Two designs are provided:

* the initial design, certifying local ISS of the estimation error for a
  nonlinearity with Lipschitz constant ``lip`` scaled by the coefficient
  bound ``pbar``;
* the redesign, which additionally exploits a learned model through the
  selection matrix ``B_phi`` and an output map ``C_q``.

Gains follow the convention ``e+ = (A + L C) e + ...``, i.e. the observer
feeds back ``L (C xhat - y)``.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NoDesignError, PreconditionError
from .numerics import (
    DEFAULT_NUMERICS,
    as_matrix,
    frobenius_norm,
    is_observable,
    max_eig,
    min_eig,
    spectral_radius,
)
from .sdp import SdpProblem, bmat

log = logging.getLogger(__name__)

# Slack subtracted from the right-hand side of the scalar gain condition so that
# the recomputed condition holds strictly despite solver round-off.
GAIN_MARGIN = 1e-7
# Lower bound on P in the redesign problem, which is not scale invariant.
REDESIGN_P_FLOOR = 1e-6


@dataclass
class LmiSolution:
    """Result of one initial-design or redesign solve."""

    P: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    L: np.ndarray
    kappa: tuple
    objective: float
    status: str
    delta0: float
    delta1: float
    lipschitz: float
    pbar: float
    mode: str = "initial"
    lambda_kappa: float = 1e-3
    iterations: int = 0
    message: str = ""

    @property
    def kappa0(self):
        return self.kappa[0]

    def is_feasible(self, numerics=DEFAULT_NUMERICS):
        return self.status == "optimal" and self.kappa[0] <= numerics.kappa_zero

    def to_dict(self):
        return {
            "mode": self.mode,
            "status": self.status,
            "lipschitz": self.lipschitz,
            "pbar": self.pbar,
            "lambda_kappa": self.lambda_kappa,
            "P": self.P.tolist(),
            "Q": self.Q.tolist(),
            "K": self.K.tolist(),
            "L": self.L.tolist(),
            "kappa": list(self.kappa),
            "objective": self.objective,
            "delta0": self.delta0,
            "delta1": self.delta1,
            "iterations": self.iterations,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            P=np.array(d["P"], dtype=float),
            Q=np.array(d["Q"], dtype=float),
            K=np.array(d["K"], dtype=float),
            L=np.array(d["L"], dtype=float),
            kappa=tuple(float(k) for k in d["kappa"]),
            objective=float(d["objective"]),
            status=d["status"],
            delta0=float(d["delta0"]),
            delta1=float(d["delta1"]),
            lipschitz=float(d["lipschitz"]),
            pbar=float(d["pbar"]),
            mode=d.get("mode", "initial"),
            lambda_kappa=float(d.get("lambda_kappa", 1e-3)),
            iterations=int(d.get("iterations", 0)),
            message=d.get("message", ""),
        )


@dataclass
class CertificateReport:
    lyap_residual: float
    gain_cond_slack: float
    schur_radius: float
    passed: bool
    delta0: float
    delta1: float
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "lyap_residual": self.lyap_residual,
            "gain_cond_slack": self.gain_cond_slack,
            "schur_radius": self.schur_radius,
            "passed": self.passed,
            "delta0": self.delta0,
            "delta1": self.delta1,
            "details": self.details,
        }


def _system_matrices(sys):
    A = as_matrix(sys.A, "A")
    C = as_matrix(sys.C, "C")
    if A.shape[0] != A.shape[1] or C.shape[1] != A.shape[0]:
        raise InvalidInputError(f"inconsistent shapes A {A.shape}, C {C.shape}")
    return A, C


def _check_scalars(pbar, lip):
    if not (np.isfinite(pbar) and pbar > 0):
        raise InvalidInputError("pbar must be a positive finite number")
    if not (np.isfinite(lip) and lip >= 0):
        raise InvalidInputError("Lipschitz constant must be nonnegative and finite")


def _common_variables(prob, n, ny, lip_scaled, p_floor, margin):
    """Declare P, K, Q, kappa and the shared constraints; return the expressions."""
    P = prob.symmetric("P", n)
    K = prob.matrix("K", n, ny)
    Q = prob.symmetric("Q", n)
    k0, k1, k2, k3 = (prob.scalar(f"kappa{i}") for i in range(4))
    prob.add_lmi(Q - k1 * np.eye(n), "psd", "Q_lower")
    prob.add_lmi(P - p_floor * np.eye(n), "psd", "P_lower")
    prob.add_lmi(k2 * np.eye(n) - P, "psd", "P_upper")
    prob.add_scalar(k0, ">=", 0.0, "kappa0_nonneg")
    prob.add_scalar(
        4.0 * lip_scaled ** 2 * k2 + 8.0 * lip_scaled * k3 - k1, "<=", -margin, "gain_condition"
    )
    return P, K, Q, (k0, k1, k2, k3)


def _frobenius_lift(prob, M, k3):
    v = M.vec()
    m = v.shape[0]
    prob.add_lmi(bmat([[k3 * np.eye(m), v], [v.T, k3]]), "psd", "frobenius")


def build_initial_design_problem(sys, pbar, lip, lambda_kappa=1e-3, margin=GAIN_MARGIN):
    """SDP whose optimum with ``kappa0 = 0`` yields a certified initial gain.

    Parameters
    ----------
    sys : SystemModel
        Only ``A`` and ``C`` are used.
    pbar : float
        Coefficient bound.
    lip : float
        Lipschitz constant of the basis functions.
    lambda_kappa : float
        Weight of the auxiliary bounds in the objective.

    Notes
    -----
    The problem is homogeneous in ``(P, K, Q, kappa)``, so ``P >= I`` is
    imposed without loss of generality to keep it bounded.
    """
    A, C = _system_matrices(sys)
    _check_scalars(pbar, lip)
    if not is_observable(A, C):
        raise PreconditionError("(A, C) is not observable")
    n, ny = A.shape[0], C.shape[0]
    prob = SdpProblem("initial-design")
    ell = pbar * lip
    P, K, Q, (k0, k1, k2, k3) = _common_variables(prob, n, ny, ell, 1.0, margin)
    M = P @ A + K @ C
    prob.add_lmi(bmat([[-P + Q - k0 * np.eye(n), M.T], [M, -P]]), "nsd", "lyapunov")
    _frobenius_lift(prob, M, k3)
    prob.minimize(k0 + lambda_kappa * (k1 + k2 + k3))
    return prob


def selection_matrix(rows, n):
    """0/1 matrix whose columns select the given state rows."""
    B = np.zeros((n, len(rows)))
    for j, r in enumerate(rows):
        if not 0 <= r < n:
            raise InvalidInputError(f"row index {r} out of range for dimension {n}")
        B[r, j] = 1.0
    return B


def build_redesign_problem(sys, lip, pbar, B_phi, lambda_kappa=1e-3, margin=GAIN_MARGIN,
                           p_floor=REDESIGN_P_FLOOR):
    """SDP for the gain redesign using a learned model with Lipschitz estimate ``lip``.

    The Lyapunov block is the 4x4 block matrix::

        [ -P+Q-k0 I   M^T     M^T B        lip Cq^T ]
        [  M          -P      0            0        ]
        [  B^T M       0      B^T P B - I  0        ]
        [  lip Cq      0      0            -I       ]   <= 0

    with ``M = P A + K C`` and ``B = B_phi``.
    """
    A, C = _system_matrices(sys)
    Cq = as_matrix(sys.Cq, "Cq")
    B_phi = as_matrix(B_phi, "B_phi")
    _check_scalars(pbar, lip)
    n, ny = A.shape[0], C.shape[0]
    if B_phi.shape[0] != n or Cq.shape[1] != n:
        raise InvalidInputError("B_phi / Cq dimensions do not match the state")
    if not np.all((B_phi == 0) | (B_phi == 1)):
        raise InvalidInputError("B_phi must be a 0/1 selection matrix")
    if not is_observable(A, C):
        raise PreconditionError("(A, C) is not observable")
    na, nq = B_phi.shape[1], Cq.shape[0]
    prob = SdpProblem("redesign")
    P, K, Q, (k0, k1, k2, k3) = _common_variables(prob, n, ny, pbar * lip, p_floor, margin)
    M = P @ A + K @ C
    MB = M.T @ B_phi
    big = bmat([
        [-P + Q - k0 * np.eye(n), M.T, MB, lip * Cq.T],
        [M, -P, np.zeros((n, na)), np.zeros((n, nq))],
        [MB.T, np.zeros((na, n)), B_phi.T @ P @ B_phi - np.eye(na), np.zeros((na, nq))],
        [lip * Cq, np.zeros((nq, n)), np.zeros((nq, na)), -np.eye(nq)],
    ])
    prob.add_lmi(big, "nsd", "lyapunov")
    _frobenius_lift(prob, M, k3)
    prob.minimize(k0 + lambda_kappa * (k1 + k2 + k3))
    return prob


def _delta_constants(P, Q, sys, lip, mode):
    phibar = float(getattr(sys, "phi_bound", 1.0))
    d0 = 0.5 * min_eig(Q)
    if mode == "redesign":
        Cq = as_matrix(sys.Cq, "Cq")
        d0 += lip ** 2 * min_eig(Cq.T @ Cq)
    d1 = phibar ** 2 * max_eig(P)
    return d0, d1


def _solution_from(prob, res, sys, lip, pbar, mode, lambda_kappa):
    n = np.shape(sys.A)[0]
    v = res.values
    P, K, Q = v["P"], v["K"], v["Q"]
    try:
        L = np.linalg.solve(P, K)
    except np.linalg.LinAlgError:
        L = np.full_like(K, np.nan)
    kappa = tuple(float(v[f"kappa{i}"]) for i in range(4))
    if res.status == "optimal" and min_eig(P) > 0:
        d0, d1 = _delta_constants(P, Q, sys, lip, mode)
    else:
        d0 = d1 = float("nan")
    assert P.shape == (n, n)
    return LmiSolution(
        P=P, Q=Q, K=K, L=L, kappa=kappa, objective=res.objective, status=res.status,
        delta0=d0, delta1=d1, lipschitz=float(lip), pbar=float(pbar), mode=mode,
        lambda_kappa=lambda_kappa, iterations=res.iterations, message=res.message,
    )


def design_initial(sys, pbar, lip, lambda_kappa=1e-3, numerics=DEFAULT_NUMERICS):
    prob = build_initial_design_problem(sys, pbar, lip, lambda_kappa)
    res = prob.solve(numerics)
    return _solution_from(prob, res, sys, lip, pbar, "initial", lambda_kappa)


def design_redesign(sys, lip, pbar, B_phi, lambda_kappa=1e-3, numerics=DEFAULT_NUMERICS):
    prob = build_redesign_problem(sys, lip, pbar, B_phi, lambda_kappa)
    res = prob.solve(numerics)
    return _solution_from(prob, res, sys, lip, pbar, "redesign", lambda_kappa)


def line_search_lipschitz(sys, pbar, lo=0.0, hi=10.0, tol=None, lambda_kappa=1e-3,
                          method="bisection", numerics=DEFAULT_NUMERICS):
    """Largest Lipschitz constant in ``[lo, hi]`` admitting a certified design.

    Parameters
    ----------
    method : {"bisection", "golden"}
        Bisection exploits monotone feasibility.  Golden-section maximizes
        the merit ``lip`` if feasible else ``-kappa0``, which is unimodal
        with its peak on the feasibility boundary.

    Returns
    -------
    lip_hat : float
    solution : LmiSolution
        Solution at ``lip_hat``.

    Raises
    ------
    NoDesignError
        If the problem is already infeasible at ``lo``.
    """
    if lo < 0 or hi < lo:
        raise InvalidInputError("need 0 <= lo <= hi")
    if tol is None:
        tol = 1e-3 * (hi - lo)
    tol = max(tol, 1e-12)
    cache = {}

    def solve(lip):
        if lip not in cache:
            cache[lip] = design_initial(sys, pbar, lip, lambda_kappa, numerics)
            s = cache[lip]
            log.debug("lip=%.6g status=%s kappa0=%.3e", lip, s.status, s.kappa0)
        return cache[lip]

    base = solve(lo)
    if not base.is_feasible(numerics):
        raise NoDesignError(
            f"no certified design at Lipschitz constant {lo:g} (kappa0={base.kappa0:.3e}, status={base.status})"
        )
    if hi == lo:
        return lo, base
    if solve(hi).is_feasible(numerics):
        return hi, solve(hi)

    if method == "bisection":
        a, b = lo, hi
        while b - a > tol:
            mid = 0.5 * (a + b)
            if solve(mid).is_feasible(numerics):
                a = mid
            else:
                b = mid
        return a, solve(a)
    if method == "golden":
        best = lo

        def merit(lip):
            nonlocal best
            s = solve(lip)
            if s.is_feasible(numerics):
                best = max(best, lip)
                return lip
            return -s.kappa0

        g = (math.sqrt(5.0) - 1.0) / 2.0
        a, b = lo, hi
        c, d = b - g * (b - a), a + g * (b - a)
        fc, fd = merit(c), merit(d)
        while b - a > tol:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - g * (b - a)
                fc = merit(c)
            else:
                a, c, fc = c, d, fd
                d = a + g * (b - a)
                fd = merit(d)
        return best, solve(best)
    raise InvalidInputError(f"unknown line-search method {method!r}")


def assemble_redesign_block(P, Q, K, sys, lip, B_phi, kappa0=0.0):
    """Numeric 4x4 block matrix of the redesign condition (for verification)."""
    A, C = _system_matrices(sys)
    Cq = as_matrix(sys.Cq, "Cq")
    B_phi = as_matrix(B_phi, "B_phi")
    n, na, nq = A.shape[0], B_phi.shape[1], Cq.shape[0]
    M = P @ A + K @ C
    Z = np.zeros
    return np.block([
        [-P + Q - kappa0 * np.eye(n), M.T, M.T @ B_phi, lip * Cq.T],
        [M, -P, Z((n, na)), Z((n, nq))],
        [B_phi.T @ M, Z((na, n)), B_phi.T @ P @ B_phi - np.eye(na), Z((na, nq))],
        [lip * Cq, Z((nq, n)), Z((nq, na)), -np.eye(nq)],
    ])


def verify_certificate(sol, sys, lip, pbar, mode="initial", B_phi=None,
                       numerics=DEFAULT_NUMERICS):
    """Recompute every certificate condition from the raw matrices.

    ``lyap_residual`` is the largest of ``lambda_max`` of the Lyapunov
    residual (initial mode: ``M^T P M - P + Q`` with ``M = A + L C``;
    redesign mode: the assembled block matrix), ``-lambda_min(P)`` and
    ``-lambda_min(Q)``.  ``gain_cond_slack`` is the left-hand side minus
    the right-hand side of the scalar gain condition.
    """
    A, C = _system_matrices(sys)
    P = np.asarray(sol.P, dtype=float)
    Q = np.asarray(sol.Q, dtype=float)
    L = np.asarray(sol.L, dtype=float)
    K = P @ L
    details = {}
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(Q)) and np.all(np.isfinite(L))):
        return CertificateReport(math.inf, math.inf, math.inf, False, math.nan, math.nan,
                                 {"reason": "non-finite matrices"})
    Psym, Qsym = 0.5 * (P + P.T), 0.5 * (Q + Q.T)
    Mcl = A + L @ C
    rho = spectral_radius(Mcl)
    if mode == "initial":
        resid = Mcl.T @ Psym @ Mcl - Psym + Qsym
        lyap = max_eig(0.5 * (resid + resid.T))
    elif mode == "redesign":
        if B_phi is None:
            raise InvalidInputError("redesign verification needs B_phi")
        lyap = max_eig(assemble_redesign_block(Psym, Qsym, K, sys, lip, B_phi))
    else:
        raise InvalidInputError(f"unknown certificate mode {mode!r}")
    lam_min_p, lam_max_p, lam_min_q = min_eig(Psym), max_eig(Psym), min_eig(Qsym)
    details.update(lyapunov_max_eig=lyap, p_min_eig=lam_min_p, q_min_eig=lam_min_q,
                   gain_consistency=frobenius_norm(Psym @ L - np.asarray(sol.K)) if np.size(sol.K) else 0.0)
    lyap_residual = max(lyap, -lam_min_p, -lam_min_q)
    ell = pbar * lip
    slack = 4.0 * ell ** 2 * lam_max_p + 8.0 * ell * frobenius_norm(Psym @ Mcl) - lam_min_q
    passed = bool(lyap_residual <= numerics.certificate_tol and slack <= 0.0 and rho < 1.0
                  and lam_min_p > 0)
    if lam_min_p > 0 and lam_min_q > -numerics.certificate_tol:
        d0, d1 = _delta_constants(Psym, Qsym, sys, lip, mode)
    else:
        d0 = d1 = math.nan
    return CertificateReport(float(lyap_residual), float(slack), float(rho), passed, d0, d1, details)
