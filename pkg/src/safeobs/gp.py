"""Zero-mean Gaussian-process regression for the reward surrogate.

Kernels
-------
``"se"``
    ``sigma0**2 * exp(-r**2 / 2)``
``"matern52"``
    ``sigma0 * (1 + sqrt(5) r + 5/3 r**2) exp(-sqrt(5) r)``; the output scale
    enters linearly unless ``square_prefactor`` is set.

with ``r**2 = sum_d ((p_d - p'_d) / ell_d)**2``.  A scalar length-scale is
broadcast to all dimensions.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import IllConditionedGramError, InvalidInputError, NotPositiveDefiniteError
from .numerics import cholesky

log = logging.getLogger(__name__)

KERNELS = ("se", "matern52")
SIGMA0_BOUNDS = (1e-4, 1e4)
SIGMA1_BOUNDS = (1e-3, 1e3)
MAX_JITTER = 1e-4
_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "matern52"
    sigma0: float = 1.0
    lengthscales: tuple = (1.0,)
    jitter: float = 1e-10
    square_prefactor: bool = False

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise InvalidInputError(f"unknown kernel {self.kind!r}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if not (self.sigma0 > 0 and np.all(ls > 0) and np.all(np.isfinite(ls))):
            raise InvalidInputError("kernel hyperparameters must be positive")
        if self.jitter < 0:
            raise InvalidInputError("jitter must be nonnegative")
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in ls))

    @property
    def variance(self):
        """Prior variance k(p, p)."""
        if self.kind == "se" or self.square_prefactor:
            return self.sigma0 ** 2
        return self.sigma0

    @property
    def scale_power(self):
        """Exponent c in ``d K / d log sigma0 = c K``."""
        return 2.0 if (self.kind == "se" or self.square_prefactor) else 1.0

    def ls_array(self, dim):
        ls = np.asarray(self.lengthscales)
        if ls.size == 1:
            return np.full(dim, ls[0])
        if ls.size != dim:
            raise InvalidInputError(f"{ls.size} length-scales for {dim}-dimensional inputs")
        return ls

    def to_dict(self):
        return {"kind": self.kind, "sigma0": self.sigma0, "lengthscales": list(self.lengthscales),
                "jitter": self.jitter, "square_prefactor": self.square_prefactor}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d["sigma0"]), tuple(d["lengthscales"]), float(d.get("jitter", 1e-10)),
                   bool(d.get("square_prefactor", False)))


def _scaled_sqdist(X, Y, ls):
    Xs, Ys = X / ls, Y / ls
    d2 = np.sum(Xs ** 2, 1)[:, None] + np.sum(Ys ** 2, 1)[None, :] - 2.0 * Xs @ Ys.T
    return np.maximum(d2, 0.0)


def _exact_sqdist(X, Y, ls):
    diff = (X[:, None, :] - Y[None, :, :]) / ls
    return np.sum(diff ** 2, axis=2)


def kernel_matrix(spec, X, Y=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    ls = spec.ls_array(X.shape[1])
    # exact differences keep the diagonal at exactly r = 0
    r2 = _exact_sqdist(X, Y, ls) if X.shape[0] * Y.shape[0] <= 250_000 else _scaled_sqdist(X, Y, ls)
    if spec.kind == "se":
        return spec.variance * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    return spec.variance * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-_SQRT5 * r)


def kernel_eval(spec, p, q):
    return float(kernel_matrix(spec, np.reshape(p, (1, -1)), np.reshape(q, (1, -1)))[0, 0])


@dataclass(frozen=True)
class GpModel:
    spec: KernelSpec
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter_used: float
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.X.shape[0]

    def predict_batch(self, P):
        """Posterior mean and variance at the rows of ``P``."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        Ks = kernel_matrix(self.spec, P, self.X)
        mu = Ks @ self.alpha
        v = solve_triangular(self.chol, Ks.T, lower=True)
        var = self.spec.variance - np.sum(v * v, axis=0)
        return mu, np.maximum(var, 0.0)

    def predict(self, p):
        mu, var = self.predict_batch(np.reshape(p, (1, -1)))
        return float(mu[0]), float(var[0])

    def log_marginal_likelihood(self):
        return float(-0.5 * self.y @ self.alpha - np.sum(np.log(np.diag(self.chol)))
                     - 0.5 * self.n * math.log(2.0 * math.pi))

    def to_dict(self):
        return {"kernel": self.spec.to_dict(), "inputs": self.X.tolist(), "targets": self.y.tolist(),
                "jitter_used": self.jitter_used}

    @classmethod
    def from_dict(cls, d):
        return fit(np.array(d["inputs"]), np.array(d["targets"]), KernelSpec.from_dict(d["kernel"]))


def _factor(K, variance, jitter):
    """Cholesky of ``K + jitter * variance * I`` with escalation; returns (L, jitter)."""
    if jitter == 0:
        try:
            return cholesky(K), 0.0
        except NotPositiveDefiniteError as exc:
            raise IllConditionedGramError(f"Gram matrix not positive definite (pivot {exc.pivot})") from exc
    j = jitter
    while True:
        try:
            return cholesky(K, j * variance), j
        except NotPositiveDefiniteError as exc:
            if j >= MAX_JITTER:
                raise IllConditionedGramError(
                    f"Gram matrix not positive definite with jitter {j:g} (pivot {exc.pivot})"
                ) from exc
            j = min(j * 10.0, MAX_JITTER)


def fit(X, y, spec):
    """Condition the GP on ``(X, y)``.

    Jitter is relative to the prior variance and escalates by factors of 10
    up to ``1e-4`` when the factorization fails.  With ``jitter = 0`` no
    escalation happens.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise InvalidInputError(f"need matching nonempty inputs/targets, got {X.shape} and {y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite training data")
    K = kernel_matrix(spec, X)
    Lc, j = _factor(K, spec.variance, spec.jitter)
    alpha = cho_solve((Lc, True), y)
    return GpModel(spec, X, y, Lc, alpha, j)


def _theta_to_spec(theta, kind, dim, ard, jitter, square):
    s0 = math.exp(theta[0])
    ls = np.exp(theta[1:]) if ard else np.full(1, math.exp(theta[1]))
    return KernelSpec(kind, s0, tuple(ls), jitter, square)


def _nll_and_grad(theta, X, y, kind, ard, jitter, square):
    """Negative log marginal likelihood and its gradient in log-hyperparameters."""
    n, dim = X.shape
    spec = _theta_to_spec(theta, kind, dim, ard, jitter, square)
    ls = spec.ls_array(dim)
    diff = (X[:, None, :] - X[None, :, :]) / ls
    sq = diff ** 2
    r2 = sq.sum(axis=2)
    if kind == "se":
        Kb = np.exp(-0.5 * r2)
        dk_dr2_factor = Kb  # d k / d log ell_d = k * sq_d
    else:
        r = np.sqrt(r2)
        e = np.exp(-_SQRT5 * r)
        Kb = (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * e
        dk_dr2_factor = (5.0 / 3.0) * (1.0 + _SQRT5 * r) * e
    K = spec.variance * Kb
    try:
        Lc, j = _factor(K, spec.variance, jitter)
    except IllConditionedGramError:
        return 1e25, np.zeros_like(theta)
    Kt = K + j * spec.variance * np.eye(n)
    alpha = cho_solve((Lc, True), y)
    nll = 0.5 * y @ alpha + np.sum(np.log(np.diag(Lc))) + 0.5 * n * math.log(2 * math.pi)
    Kinv = cho_solve((Lc, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv  # dLML = 0.5 tr(W dK)
    grad = np.zeros_like(theta)
    grad[0] = -0.5 * np.sum(W * (spec.scale_power * Kt))
    base = spec.variance * dk_dr2_factor
    if ard:
        for d in range(dim):
            grad[1 + d] = -0.5 * np.sum(W * (base * sq[:, :, d]))
    else:
        grad[1] = -0.5 * np.sum(W * (base * r2))
    return float(nll), grad


def optimize_hyperparameters(X, y, kind="matern52", n_starts=5, rng=None, ard=None,
                             jitter=1e-10, square_prefactor=False,
                             sigma0_bounds=SIGMA0_BOUNDS, sigma1_bounds=SIGMA1_BOUNDS, initial=None):
    """Maximize the log marginal likelihood over ``(sigma0, length-scales)``.

    L-BFGS-B in log space with analytic gradients.  The first start is a
    data-driven guess, the remaining ``n_starts - 1`` are random
    perturbations of it drawn from ``rng``.  ``initial`` (a KernelSpec, e.g.
    the previous iteration's optimum) adds one more start.

    Returns
    -------
    spec : KernelSpec
    info : dict
        ``log_likelihood``, ``n_success`` and ``warning`` (set when every
        local search failed and the best start point is returned).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 2:
        raise InvalidInputError("hyperparameter optimization needs at least two points")
    if n_starts < 1:
        raise InvalidInputError("n_starts must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    dim = X.shape[1]
    ard = (kind == "matern52") if ard is None else ard
    n_ls = dim if ard else 1
    lo = np.array([math.log(sigma0_bounds[0])] + [math.log(sigma1_bounds[0])] * n_ls)
    hi = np.array([math.log(sigma0_bounds[1])] + [math.log(sigma1_bounds[1])] * n_ls)
    var_y = float(np.var(y)) + float(np.mean(y)) ** 2
    s0 = math.sqrt(var_y) if (kind == "se" or square_prefactor) else var_y
    spread = np.ptp(X, axis=0)
    ls0 = np.where(spread > 0, 0.5 * spread, 1.0)
    guess = np.concatenate([[math.log(max(s0, 1e-300))], np.log(ls0 if ard else [np.mean(ls0)])])
    starts = [np.clip(guess, lo, hi)]
    for _ in range(n_starts - 1):
        starts.append(np.clip(guess + rng.uniform(-2.0, 2.0, size=guess.size), lo, hi))
    if initial is not None and initial.kind == kind and len(initial.lengthscales) in (1, n_ls):
        ls_init = np.broadcast_to(np.log(initial.lengthscales), (n_ls,))
        starts.insert(0, np.clip(np.concatenate([[math.log(initial.sigma0)], ls_init]), lo, hi))

    def f(th):
        return _nll_and_grad(th, X, y, kind, ard, jitter, square_prefactor)

    best_theta, best_val, n_ok = None, np.inf, 0
    for th0 in starts:
        v0, _ = f(th0)
        if v0 < best_val:
            best_theta, best_val = th0, v0
        try:
            res = minimize(f, th0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)))
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:  # pragma: no cover
            log.debug("hyperparameter start failed: %s", exc)
            continue
        if np.all(np.isfinite(res.x)) and np.isfinite(res.fun):
            n_ok += res.success
            if res.fun < best_val:
                best_theta, best_val = res.x, float(res.fun)
    spec = _theta_to_spec(np.clip(best_theta, lo, hi), kind, dim, ard, jitter, square_prefactor)
    # exp(log(bound)) can overshoot the bound by one ulp
    spec = KernelSpec(kind, float(np.clip(spec.sigma0, *sigma0_bounds)),
                      tuple(np.clip(spec.lengthscales, *sigma1_bounds)), jitter, square_prefactor)
    info = {"log_likelihood": -best_val, "n_success": int(n_ok), "warning": n_ok == 0}
    if n_ok == 0:
        log.info("all %d hyperparameter searches failed; using best start point", len(starts))
    return spec, info
