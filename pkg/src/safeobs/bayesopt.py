"""Expected-improvement Bayesian optimization of the observer reward.

Random streams come from numpy's PCG64 bit generator seeded through
``SeedSequence(seed)``; the proposal sampler and the hyperparameter
restarts use two spawned child sequences so each is reproducible on its own.
"""

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import gp
from .errors import (
    DivergenceError,
    IllConditionedGramError,
    InvalidInputError,
    LearningAbortedError,
    PreconditionError,
    SafetyViolationError,
)
from .system import ObserverConfig, compute_reward, simulate, simulate_plant

log = logging.getLogger(__name__)


@dataclass
class LearningConfig:
    """Settings of the learning loop (defaults follow the Van der Pol study)."""

    lower: np.ndarray
    upper: np.ndarray
    M: int = 1000
    N: int = 200
    eps_ei: float = 0.01
    seed: int = 0
    W1: object = 200.0
    W2: object = 1.0
    anchor: object = None
    T_ell: int = 4000
    t_star: int = 0
    kernel: str = "matern52"
    n_restarts: int = 5
    square_prefactor: bool = False
    jitter: float = 1e-10
    incumbent: str = "observed"  # or "surrogate"
    final: str = "incumbent"  # or "last_proposal"
    stop_on_ei: bool = True
    target_normalization: str = "none"  # or "standardize"
    p0: object = None
    threads: int = 1

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or not np.all(self.lower < self.upper):
            raise InvalidInputError("candidate box must satisfy lower < upper componentwise")
        if self.M < 1 or self.N < 1:
            raise InvalidInputError("M and N must be positive")
        if not self.eps_ei > 0:
            raise InvalidInputError("eps_ei must be positive")
        if self.incumbent not in ("observed", "surrogate"):
            raise InvalidInputError(f"unknown incumbent mode {self.incumbent!r}")
        if self.final not in ("incumbent", "last_proposal"):
            raise InvalidInputError(f"unknown final-coefficient mode {self.final!r}")
        if self.target_normalization not in ("none", "standardize"):
            raise InvalidInputError(f"unknown target normalization {self.target_normalization!r}")
        if self.threads < 1:
            raise InvalidInputError("threads must be positive")

    @property
    def dim(self):
        return self.lower.size


@dataclass
class LearningState:
    inputs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    incumbent_value: float = -math.inf
    incumbent_p: object = None
    iteration: int = 0
    trace: list = field(default_factory=list)
    terminated: bool = False
    reason: str = ""
    next_proposal: object = None
    seed: int = 0

    def add(self, p, reward):
        self.inputs.append(np.array(p, dtype=float))
        self.rewards.append(float(reward))
        if reward > self.incumbent_value:
            self.incumbent_value = float(reward)
            self.incumbent_p = np.array(p, dtype=float)

    def to_dict(self):
        return {
            "seed": self.seed,
            "inputs": [p.tolist() for p in self.inputs],
            "rewards": self.rewards,
            "incumbent_value": self.incumbent_value,
            "incumbent_p": None if self.incumbent_p is None else self.incumbent_p.tolist(),
            "iterations": self.iteration,
            "terminated": self.terminated,
            "reason": self.reason,
            "next_proposal": None if self.next_proposal is None else np.asarray(self.next_proposal).tolist(),
        }

    def trace_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if not self.trace:
            w.writerow(["iteration", "reward", "incumbent", "max_ei"])
            return buf.getvalue()
        n_p = len(self.trace[0]["p"])
        n_ls = len(self.trace[0]["lengthscales"])
        w.writerow(["iteration", "reward", "incumbent", "max_ei", "sigma0"]
                   + [f"ell{i + 1}" for i in range(n_ls)] + [f"p{i + 1}" for i in range(n_p)])
        for row in self.trace:
            w.writerow([row["iteration"], repr(row["reward"]), repr(row["incumbent"]), repr(row["max_ei"]),
                        repr(row["sigma0"])] + [repr(v) for v in row["lengthscales"]]
                       + [repr(v) for v in row["p"]])
        return buf.getvalue()


def make_streams(seed):
    """Independent generators for candidate sampling and hyperparameter restarts."""
    ss = np.random.SeedSequence(int(seed))
    a, b = ss.spawn(2)
    return np.random.Generator(np.random.PCG64(a)), np.random.Generator(np.random.PCG64(b))


def expected_improvement(mu, sigma, incumbent):
    """Closed-form EI for maximization; zero wherever ``sigma == 0``.

    Parameters
    ----------
    mu, sigma : array_like
        Posterior mean and standard deviation (not variance).
    incumbent : float
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    out = np.zeros(np.broadcast(mu, sigma).shape)
    mu_b, s_b = np.broadcast_to(mu, out.shape), np.broadcast_to(sigma, out.shape)
    pos = s_b > 0
    if np.any(pos):
        d = mu_b[pos] - incumbent
        # z = +-inf for tiny sigma still gives the correct limit
        with np.errstate(over="ignore"):
            z = d / s_b[pos]
            out[pos] = s_b[pos] * norm.pdf(z) + d * norm.cdf(z)
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


class _Surrogate:
    """GP on (optionally standardized) targets, predicting in reward units."""

    def __init__(self, model, shift=0.0, scale=1.0):
        self.model, self.shift, self.scale = model, shift, scale

    def predict_batch(self, P):
        mu, var = self.model.predict_batch(P)
        return mu * self.scale + self.shift, np.sqrt(var) * self.scale


def _ei_values(surrogate, cands, incumbent, threads):
    def chunk(c):
        mu, s = surrogate.predict_batch(c)
        return expected_improvement(mu, s, incumbent)

    if threads == 1 or cands.shape[0] < 2 * threads:
        return chunk(cands)
    parts = np.array_split(cands, threads)
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return np.concatenate(list(ex.map(chunk, parts)))


def sample_candidates(lower, upper, M, rng):
    return rng.uniform(lower, upper, size=(int(M), np.size(lower)))


def propose_next(model, lower, upper, M, rng, incumbent, threads=1):
    """Draw ``M`` uniform candidates and return the EI maximizer.

    Ties go to the lowest sample index.

    Returns
    -------
    p : ndarray
    max_ei : float
    candidates : ndarray, shape (M, dim)
    ei : ndarray, shape (M,)
    """
    cands = sample_candidates(lower, upper, M, rng)
    ei = _ei_values(model if hasattr(model, "shift") else _Surrogate(model), cands, incumbent, threads)
    k = int(np.argmax(ei))  # first occurrence of the maximum
    return cands[k].copy(), float(ei[k]), cands, ei


def should_terminate(model, candidates, eps_ei, incumbent):
    """True iff the largest EI over ``candidates`` is strictly below ``eps_ei``."""
    sur = model if hasattr(model, "shift") else _Surrogate(model)
    mu, s = sur.predict_batch(candidates)
    return bool(np.max(expected_improvement(mu, s, incumbent)) < eps_ei)


def _fit_surrogate(X, y, cfg, rng_hyp, box_width, previous=None):
    y = np.asarray(y, dtype=float)
    shift, scale = 0.0, 1.0
    if cfg.target_normalization == "standardize":
        shift = float(np.mean(y))
        # one point has no spread; its magnitude sets the scale instead
        sd = float(np.std(y)) if y.size > 1 else abs(float(y[0]))
        scale = sd if sd > 0 else 1.0
    z = (y - shift) / scale
    if len(y) >= 2:
        spec, info = gp.optimize_hyperparameters(
            X, z, cfg.kernel, cfg.n_restarts, rng_hyp, jitter=cfg.jitter,
            square_prefactor=cfg.square_prefactor, initial=previous)
    else:
        v = 1.0 if cfg.target_normalization == "standardize" else max(float(z[0] ** 2), gp.SIGMA0_BOUNDS[0] ** 2)
        s0 = math.sqrt(v) if (cfg.kernel == "se" or cfg.square_prefactor) else v
        s0 = float(np.clip(s0, *gp.SIGMA0_BOUNDS))
        ls = tuple(np.clip(0.5 * box_width, *gp.SIGMA1_BOUNDS)) if cfg.kernel == "matern52" else \
            (float(np.clip(0.5 * np.mean(box_width), *gp.SIGMA1_BOUNDS)),)
        spec = gp.KernelSpec(cfg.kernel, s0, ls, cfg.jitter, cfg.square_prefactor)
        info = {"log_likelihood": float("nan"), "n_success": 0, "warning": False}
    return _Surrogate(gp.fit(X, z, spec), shift, scale), info


def bo_maximize(objective, cfg, p0=None, on_error=None):
    """Generic EI loop maximizing ``objective`` over the box in ``cfg``.

    ``on_error(iteration, p, exc)`` may translate exceptions raised by the
    objective; by default they propagate.
    """
    rng_prop, rng_hyp = make_streams(cfg.seed)
    state = LearningState(seed=int(cfg.seed))
    p = np.zeros(cfg.dim) if p0 is None else np.asarray(p0, dtype=float).ravel()
    if p.size != cfg.dim:
        raise InvalidInputError(f"p0 has {p.size} entries, box has {cfg.dim}")
    width = cfg.upper - cfg.lower
    previous = None
    for j in range(cfg.N):
        state.iteration = j + 1
        try:
            reward = float(objective(p))
        except Exception as exc:
            if on_error is None:
                raise
            err = on_error(j, p, exc)
            state.reason = f"aborted: {type(err).__name__}"
            err.state = state  # partial trace stays available to the caller
            raise err from exc
        state.add(p, reward)
        X = np.vstack(state.inputs)
        try:
            sur, info = _fit_surrogate(X, state.rewards, cfg, rng_hyp, width, previous)
        except IllConditionedGramError as exc:
            err = LearningAbortedError(f"GP fit failed at iteration {j}: {exc}")
            state.reason = "aborted: GP fit failed"
            err.state = state
            raise err from exc
        if cfg.incumbent == "observed":
            inc = state.incumbent_value
            cands = sample_candidates(cfg.lower, cfg.upper, cfg.M, rng_prop)
        else:
            cands = sample_candidates(cfg.lower, cfg.upper, cfg.M, rng_prop)
            inc = float(max(np.max(sur.predict_batch(cands)[0]), np.max(sur.predict_batch(X)[0])))
        ei = _ei_values(sur, cands, inc, cfg.threads)
        k = int(np.argmax(ei))
        max_ei = float(ei[k])
        spec = previous = sur.model.spec
        state.trace.append({
            "iteration": j, "reward": reward, "incumbent": state.incumbent_value, "max_ei": max_ei,
            "sigma0": spec.sigma0, "lengthscales": list(spec.lengthscales), "p": p.tolist(),
            "hyper_warning": bool(info["warning"]),
        })
        log.info("iter %d reward %.6g incumbent %.6g maxEI %.3g", j, reward, state.incumbent_value, max_ei)
        p = cands[k].copy()
        state.next_proposal = p
        if cfg.stop_on_ei and max_ei < cfg.eps_ei:
            state.terminated, state.reason = True, "ei-threshold"
            break
    else:
        state.reason = "max-iterations"
    return state


def final_coefficients(state, cfg):
    if cfg.final == "incumbent":
        return np.array(state.incumbent_p)
    return np.array(state.inputs[-1])


def run_learning_loop(sys, L0, template, cfg, x0, xhat0=None, certificate=None, guard=1e6, u_seq=None):
    """Learn expansion coefficients by maximizing the batch reward.

    Each iteration restarts plant and observer from ``x0`` / ``xhat0``,
    simulates ``cfg.T_ell`` samples with the candidate coefficients and the
    fixed gain ``L0``, and scores the run with :func:`compute_reward`.

    Returns
    -------
    p_inf : ndarray
    state : LearningState

    Raises
    ------
    PreconditionError
        If a certificate is supplied and did not pass.
    SafetyViolationError
        If a batch simulation diverges.
    """
    if certificate is not None and not certificate.passed:
        raise PreconditionError("learning requires a verified observer certificate")
    if template.n_p != cfg.dim:
        raise InvalidInputError(f"box dimension {cfg.dim} does not match {template.n_p} coefficients")
    xhat0 = np.zeros(sys.n_x) if xhat0 is None else np.asarray(xhat0, dtype=float)
    anchor = np.full(cfg.dim, template.pbar) if cfg.anchor is None else np.asarray(cfg.anchor, dtype=float)
    T = int(cfg.T_ell)
    try:
        plant = simulate_plant(sys, x0, u_seq, T, guard)
    except DivergenceError as exc:
        err = SafetyViolationError(0, np.zeros(cfg.dim), exc)
        err.state = LearningState(seed=int(cfg.seed))
        raise err from exc

    def objective(p):
        obs = ObserverConfig(L0, template.with_coefficients(p, enforce_bound=False), xhat0)
        tr = simulate(sys, obs, x0, T, u_seq=u_seq, guard=guard, plant=plant)
        yhat = tr.xhat @ sys.C.T
        return compute_reward(tr.y, yhat, p, anchor, cfg.W1, cfg.W2, T, cfg.t_star)

    def on_error(j, p, exc):
        if isinstance(exc, DivergenceError):
            return SafetyViolationError(j, p, exc)
        return exc

    state = bo_maximize(objective, cfg, cfg.p0, on_error)
    return final_coefficients(state, cfg), state


@dataclass
class RegretLog:
    instantaneous: np.ndarray
    cumulative: np.ndarray
    optimum: float

    def average(self, n):
        """``R_n / n`` using the first ``n`` iterations."""
        return float(self.cumulative[n - 1] / n)


def cumulative_regret(rewards, optimum):
    """Per-iteration and cumulative regret against a known optimum."""
    r = np.asarray(getattr(rewards, "rewards", rewards), dtype=float)
    inst = float(optimum) - r
    return RegretLog(inst, np.cumsum(inst), float(optimum))


def regret_bound(N, B, chi, delta):
    """``sqrt(N zeta chi)`` with ``zeta = 2 B + 300 chi log(N / delta)**3``."""
    if not (N >= 1 and 0 < delta < 1 and B > 0 and chi > 0):
        raise InvalidInputError("need N >= 1, 0 < delta < 1, B > 0, chi > 0")
    zeta = 2.0 * B + 300.0 * chi * math.log(N / delta) ** 3
    return math.sqrt(N * zeta * chi)


def quadratic_objective(p, center=0.3):
    return -float((np.asarray(p).ravel()[0] - center) ** 2)


def synthetic_benchmark(seed, N=100, M=1000, kernel="se", center=0.3, stop_on_ei=False):
    """EI on ``-(p - center)^2`` over ``[-1, 1]``; optimum value 0."""
    cfg = LearningConfig(lower=[-1.0], upper=[1.0], M=M, N=N, seed=seed, kernel=kernel,
                         stop_on_ei=stop_on_ei, eps_ei=1e-12)
    state = bo_maximize(lambda p: quadratic_objective(p, center), cfg)
    return state, cumulative_regret(state.rewards, 0.0)
