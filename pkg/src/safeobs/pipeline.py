"""End-to-end pipeline: initial design, learning, redesign, simulation.

Each phase reads and writes JSON/CSV artifacts in one output directory::

    manifest.json   config, config hash, seed, artifact digests
    phase1.json     initial gain, Lipschitz estimate, certificate
    trace.csv       learning trace (one row per iteration)
    learning.json   dataset, final coefficients, termination
    phase3.json     redesigned gain and certificate (or the reason it was kept)
    traj_*.csv      simulated trajectories
    summary.md      error-energy table

Artifacts contain no timestamps, so identical config and seed give
byte-identical files.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .basis import Basis, preset
from .bayesopt import LearningConfig, final_coefficients, run_learning_loop
from .errors import (
    ConfigError,
    DivergenceError,
    InvalidInputError,
    LearningAbortedError,
    NoDesignError,
    PreconditionError,
    SafeObsError,
    SafetyViolationError,
)
from .lipschitz import (
    BoxDomain,
    analytic_lipschitz_bound,
    max_expansion_gradient_norm,
    sampled_lipschitz_estimate,
)
from .lmi import LmiSolution, design_redesign, line_search_lipschitz, verify_certificate
from .system import BasisExpansion, ObserverConfig, SystemModel, simulate, van_der_pol_model

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_LEARNING = 4
EXIT_DIVERGENCE = 5

Matrix = List[List[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BasisConfig(_Strict):
    preset: Optional[Literal["vdp_legendre", "identity", "tanh"]] = None
    n_q: Optional[int] = Field(default=None, ge=1)
    scale: float = 1.0
    terms: Optional[List[dict]] = None

    @model_validator(mode="after")
    def _one_kind(self):
        if (self.preset is None) == (self.terms is None):
            raise ValueError("give exactly one of 'preset' or 'terms'")
        if self.preset in ("identity", "tanh") and self.n_q is None:
            raise ValueError(f"preset {self.preset!r} needs n_q")
        if self.terms is not None and self.n_q is None:
            raise ValueError("'terms' needs n_q")
        return self

    def build(self):
        if self.preset == "vdp_legendre":
            return preset("vdp_legendre")
        if self.preset is not None:
            return preset(self.preset, n_q=self.n_q)
        return Basis(self.terms, self.n_q, self.scale)


class ExpansionConfig(_Strict):
    basis: BasisConfig
    rows: List[int] = Field(min_length=1)
    coefficients: Optional[List[float]] = None


class InputConfig(_Strict):
    kind: Literal["zero", "sine"] = "zero"
    amplitude: float = 1.0
    period_steps: float = Field(default=100.0, gt=0)


class SystemConfig(_Strict):
    benchmark: Optional[Literal["vdp"]] = None
    tau: float = Field(default=0.01, gt=0)
    A: Optional[Matrix] = None
    B: Optional[Matrix] = None
    C: Optional[Matrix] = None
    Cq: Optional[Matrix] = None
    true_phi: Optional[ExpansionConfig] = None
    phi_bound: float = Field(default=1.0, gt=0)
    input: InputConfig = InputConfig()

    @field_validator("A", "B", "C", "Cq")
    @classmethod
    def _rectangular(cls, m):
        if m is None:
            return m
        if not m or not m[0] or any(len(row) != len(m[0]) for row in m):
            raise ValueError("matrix must be a nonempty list of equal-length rows")
        if not np.all(np.isfinite(np.asarray(m, dtype=float))):
            raise ValueError("matrix entries must be finite")
        return m

    @model_validator(mode="after")
    def _complete(self):
        if self.benchmark is None:
            missing = [k for k in ("A", "B", "C", "Cq", "true_phi") if getattr(self, k) is None]
            if missing:
                raise ValueError(f"custom system needs {', '.join(missing)}")
        elif any(getattr(self, k) is not None for k in ("A", "B", "C", "Cq", "true_phi")):
            raise ValueError("benchmark systems take no explicit matrices")
        return self


class ModelConfig(_Strict):
    basis: Optional[BasisConfig] = None
    rows: Optional[List[int]] = None


class DesignConfig(_Strict):
    lip_range: Tuple[float, float] = (0.0, 10.0)
    tol: Optional[float] = Field(default=None, gt=0)
    lambda_kappa: float = Field(default=1e-3, gt=0)
    method: Literal["bisection", "golden"] = "bisection"

    @model_validator(mode="after")
    def _range(self):
        lo, hi = self.lip_range
        if not (0 <= lo <= hi):
            raise ValueError("lip_range must satisfy 0 <= lo <= hi")
        return self


class LearningSettings(_Strict):
    M: int = Field(default=1000, ge=1)
    N: int = Field(default=200, ge=1)
    eps_ei: float = Field(default=0.01, gt=0)
    W1: Union[float, Matrix] = 200.0
    W2: Union[float, Matrix] = 1.0
    anchor: Optional[List[float]] = None
    T_ell: int = Field(default=4000, ge=1)
    t_star: int = Field(default=0, ge=0)
    box_lower: Optional[List[float]] = None
    box_upper: Optional[List[float]] = None
    kernel: Literal["matern52", "se"] = "matern52"
    n_restarts: int = Field(default=5, ge=1)
    square_prefactor: bool = False
    jitter: float = Field(default=1e-10, ge=0)
    incumbent: Literal["observed", "surrogate"] = "observed"
    final: Literal["incumbent", "last_proposal"] = "incumbent"
    stop_on_ei: bool = True
    target_normalization: Literal["none", "standardize"] = "none"
    p0: Optional[List[float]] = None

    @model_validator(mode="after")
    def _tstar(self):
        if self.t_star >= self.T_ell:
            raise ValueError("t_star must be below T_ell")
        return self


class RedesignConfig(_Strict):
    estimator: Literal["analytic", "sampled", "value"] = "analytic"
    value: Optional[float] = Field(default=None, gt=0)
    box_lower: Optional[List[float]] = None
    box_upper: Optional[List[float]] = None
    safety: float = Field(default=1.05, ge=1)
    grid_per_dim: int = Field(default=101, ge=2)
    norm: Literal["spectral", "frobenius"] = "spectral"
    n_pairs: int = Field(default=100_000, ge=1)
    inflation: float = Field(default=1.1, ge=1)
    lambda_kappa: float = Field(default=1e-3, gt=0)

    @model_validator(mode="after")
    def _value(self):
        if self.estimator == "value" and self.value is None:
            raise ValueError("estimator 'value' needs 'value'")
        return self


class PipelineConfig(_Strict):
    version: Literal[1] = 1
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    pbar: float = Field(default=1e-2, gt=0)
    x0: List[float]
    xhat0: Optional[List[float]] = None
    system: SystemConfig
    model: ModelConfig = ModelConfig()
    design: DesignConfig = DesignConfig()
    learning: LearningSettings = LearningSettings()
    redesign: RedesignConfig = RedesignConfig()
    simulate_T: Optional[int] = Field(default=None, ge=1)
    threads: int = Field(default=1, ge=1)


def vdp_config(seed=0):
    """Configuration of the Van der Pol study."""
    return {
        "version": 1,
        "seed": seed,
        "pbar": 1e-2,
        "x0": [1.0, 1.0],
        "xhat0": [0.0, 0.0],
        "system": {"benchmark": "vdp", "tau": 0.01},
        "design": {"lip_range": [0.0, 10.0]},
        "learning": {"M": 1000, "N": 200, "eps_ei": 0.01, "W1": 200.0, "W2": 1.0, "T_ell": 4000},
        "redesign": {"estimator": "analytic", "box_lower": [-5.0, -5.0], "box_upper": [5.0, 5.0]},
    }


def _structured(exc):
    return [{"loc": tuple(e.get("loc", ())), "msg": e.get("msg", str(e))} for e in exc.errors()]


def parse_config(data):
    """Validate a config mapping; raises :class:`ConfigError` on any problem."""
    if not isinstance(data, dict):
        raise ConfigError([{"loc": (), "msg": "configuration must be a JSON object"}])
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_structured(exc)) from None


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError([{"loc": ("file",), "msg": str(exc)}]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([{"loc": ("file",), "msg": f"invalid JSON: {exc}"}]) from None
    return parse_config(data)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg.model_dump(mode="json"), sort_keys=True).encode()).hexdigest()


class Scenario:
    """Concrete objects built from a validated config (all preconditions checked here)."""

    def __init__(self, cfg):
        self.cfg = cfg
        try:
            self._build()
        except (InvalidInputError, PreconditionError) as exc:
            raise ConfigError([{"loc": ("scenario",), "msg": str(exc)}]) from None

    def _build(self):
        cfg, sc = self.cfg, self.cfg.system
        if sc.benchmark == "vdp":
            self.sys, template = van_der_pol_model(sc.tau, cfg.pbar)
            basis, rows = template.basis, template.rows
        else:
            true_exp = BasisExpansion(sc.true_phi.basis.build(), sc.true_phi.rows, len(sc.A),
                                      sc.true_phi.coefficients, cfg.pbar, enforce_bound=False)
            self.sys = SystemModel(sc.A, sc.B, sc.C, sc.Cq, true_phi=true_exp, phi_bound=sc.phi_bound,
                                   tau=sc.tau)
            basis, rows = true_exp.basis, true_exp.rows
        self.sys.phi_bound = sc.phi_bound
        if cfg.model.basis is not None:
            basis = cfg.model.basis.build()
        if cfg.model.rows is not None:
            rows = cfg.model.rows
        if basis.n_q != self.sys.n_q:
            raise InvalidInputError(f"basis takes {basis.n_q} inputs but Cq has {self.sys.n_q} rows")
        self.template = BasisExpansion(basis, rows, self.sys.n_x, None, cfg.pbar)
        n = self.sys.n_x
        self.x0 = np.asarray(cfg.x0, dtype=float)
        self.xhat0 = np.zeros(n) if cfg.xhat0 is None else np.asarray(cfg.xhat0, dtype=float)
        if self.x0.size != n or self.xhat0.size != n:
            raise InvalidInputError(f"x0 and xhat0 need {n} entries")
        lc = cfg.learning
        n_p = self.template.n_p
        lower = [-cfg.pbar] * n_p if lc.box_lower is None else lc.box_lower
        upper = [cfg.pbar] * n_p if lc.box_upper is None else lc.box_upper
        if len(lower) != n_p or len(upper) != n_p:
            raise InvalidInputError(f"learning box needs {n_p} entries per bound")
        for name, vec in (("anchor", lc.anchor), ("p0", lc.p0)):
            if vec is not None and len(vec) != n_p:
                raise InvalidInputError(f"{name} needs {n_p} entries")
        self.learning = LearningConfig(
            lower=lower, upper=upper, M=lc.M, N=lc.N, eps_ei=lc.eps_ei, seed=cfg.seed,
            W1=np.asarray(lc.W1, dtype=float), W2=np.asarray(lc.W2, dtype=float), anchor=lc.anchor,
            T_ell=lc.T_ell, t_star=lc.t_star, kernel=lc.kernel, n_restarts=lc.n_restarts,
            square_prefactor=lc.square_prefactor, jitter=lc.jitter, incumbent=lc.incumbent,
            final=lc.final, stop_on_ei=lc.stop_on_ei, target_normalization=lc.target_normalization,
            p0=lc.p0, threads=cfg.threads,
        )
        W1, W2 = self.learning.W1, self.learning.W2
        if W1.ndim and (W1.shape != (self.sys.n_y,) * 2 or np.linalg.eigvalsh(0.5 * (W1 + W1.T))[0] <= 0):
            raise InvalidInputError("W1 must be a positive definite n_y x n_y matrix")
        if not W1.ndim and W1 <= 0:
            raise InvalidInputError("W1 must be positive")
        if W2.ndim and W2.shape != (n_p, n_p):
            raise InvalidInputError("W2 must be n_p x n_p")
        if not W2.ndim and W2 < 0:
            raise InvalidInputError("W2 must be nonnegative")
        rc = cfg.redesign
        nq = self.sys.n_q
        blo = [-5.0] * nq if rc.box_lower is None else rc.box_lower
        bhi = [5.0] * nq if rc.box_upper is None else rc.box_upper
        if len(blo) != nq or len(bhi) != nq:
            raise InvalidInputError(f"redesign box needs {nq} entries per bound")
        self.box = BoxDomain(tuple(blo), tuple(bhi))
        self.T = cfg.simulate_T or lc.T_ell
        T_in = max(self.T, lc.T_ell)
        inp = cfg.system.input
        if inp.kind == "sine" and self.sys.n_u:
            t = np.arange(T_in)
            self.u = np.tile(inp.amplitude * np.sin(2 * np.pi * t / inp.period_steps)[:, None], (1, self.sys.n_u))
        else:
            self.u = np.zeros((T_in, self.sys.n_u))


class PhaseFailure(SafeObsError):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


class Runner:
    """Runs pipeline phases against one output directory."""

    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.scn = Scenario(cfg)
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)

    # -- artifact helpers --------------------------------------------------

    def _write(self, name, text):
        (self.out / name).write_text(text)
        self._update_manifest()

    def _write_json(self, name, obj):
        self._write(name, canonical_json(obj))

    def _read_json(self, name):
        path = self.out / name
        if not path.exists():
            raise PhaseFailure(EXIT_CONFIG, f"missing artifact {name}; run the earlier phase first")
        return json.loads(path.read_text())

    def _update_manifest(self):
        arts = {}
        for p in sorted(self.out.iterdir()):
            if p.is_file() and p.name != "manifest.json":
                arts[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "package_version": __version__,
            "config_version": self.cfg.version,
            "config_hash": config_hash(self.cfg),
            "seed": self.cfg.seed,
            "config": self.cfg.model_dump(mode="json"),
            "artifacts": arts,
        }
        (self.out / "manifest.json").write_text(canonical_json(manifest))

    def load_phase1(self):
        """Load the initial design and re-verify its certificate."""
        d = self._read_json("phase1.json")
        sol = LmiSolution.from_dict(d["solution"])
        rep = verify_certificate(sol, self.scn.sys, d["lipschitz"], d["pbar"], "initial")
        if not rep.passed:
            raise PhaseFailure(EXIT_INFEASIBLE, "stored initial certificate does not re-verify")
        return sol, rep

    def load_phase3(self):
        d = self._read_json("phase3.json")
        if not d.get("redesigned"):
            return None, None
        sol = LmiSolution.from_dict(d["solution"])
        rep = verify_certificate(sol, self.scn.sys, d["lipschitz"], d["pbar"], "redesign",
                                 self.scn.template.B_phi)
        if not rep.passed:
            raise PhaseFailure(EXIT_INFEASIBLE, "stored redesign certificate does not re-verify")
        return sol, rep

    # -- phases ------------------------------------------------------------

    def design_initial(self):
        d = self.cfg.design
        lo, hi = d.lip_range
        try:
            lip, sol = line_search_lipschitz(self.scn.sys, self.cfg.pbar, lo, hi, d.tol, d.lambda_kappa, d.method)
        except NoDesignError as exc:
            self._write_json("phase1.json", {"status": "no-design", "message": str(exc)})
            raise PhaseFailure(EXIT_INFEASIBLE, str(exc)) from None
        rep = verify_certificate(sol, self.scn.sys, lip, self.cfg.pbar, "initial")
        self._write_json("phase1.json", {
            "status": "certified" if rep.passed else "certificate-failed",
            "lipschitz": lip, "pbar": self.cfg.pbar, "solution": sol.to_dict(), "certificate": rep.to_dict(),
        })
        if not rep.passed:
            raise PhaseFailure(EXIT_INFEASIBLE, "initial design did not pass independent verification")
        return lip, sol, rep

    def learn(self):
        sol, rep = self.load_phase1()
        scn = self.scn
        try:
            p_inf, state = run_learning_loop(scn.sys, sol.L, scn.template, scn.learning, scn.x0, scn.xhat0,
                                             certificate=rep, u_seq=scn.u)
        except (SafetyViolationError, LearningAbortedError) as exc:
            state = getattr(exc, "state", None)
            if state is not None:
                self._write("trace.csv", state.trace_csv())
            self._write_json("learning.json", {
                "status": "aborted", "error": type(exc).__name__, "message": str(exc),
                "dataset": None if state is None else state.to_dict(),
                "offending_coefficients": getattr(exc, "coefficients", None),
            })
            raise PhaseFailure(EXIT_LEARNING, str(exc)) from None
        self._write("trace.csv", state.trace_csv())
        self._write_json("learning.json", {
            "status": "completed", "p_inf": p_inf.tolist(), "dataset": state.to_dict(),
            "final_mode": scn.learning.final,
        })
        return p_inf, state

    def load_learning(self):
        d = self._read_json("learning.json")
        if d.get("status") != "completed":
            raise PhaseFailure(EXIT_LEARNING, "learning did not complete")
        return np.asarray(d["p_inf"], dtype=float)

    def estimate_lipschitz(self, expansion):
        rc, box = self.cfg.redesign, self.scn.box
        if rc.estimator == "value":
            return float(rc.value)
        if rc.estimator == "analytic":
            return analytic_lipschitz_bound(expansion, box, rc.grid_per_dim, rc.safety, rc.norm)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.cfg.seed, 3])))
        return sampled_lipschitz_estimate(expansion.eval_batch, box, rc.n_pairs, rc.inflation, rng,
                                          vectorized=True)

    def redesign(self):
        sol0, rep0 = self.load_phase1()
        p_inf = self.load_learning()
        exp = self.scn.template.with_coefficients(p_inf, enforce_bound=False)
        lip = self.estimate_lipschitz(exp)
        rc = self.cfg.redesign
        record = {"estimator": rc.estimator, "lipschitz": lip, "pbar": self.cfg.pbar,
                  "expansion_gradient_max": max_expansion_gradient_norm(exp, self.scn.box, min(rc.grid_per_dim, 201))
                  if exp.basis.differentiable else None}
        if lip <= 0:
            record.update(redesigned=False, reason="zero Lipschitz estimate; initial gain kept")
            self._write_json("phase3.json", record)
            return None, None
        sol = design_redesign(self.scn.sys, lip, self.cfg.pbar, self.scn.template.B_phi, rc.lambda_kappa)
        rep = verify_certificate(sol, self.scn.sys, lip, self.cfg.pbar, "redesign", self.scn.template.B_phi)
        if sol.is_feasible() and rep.passed:
            record.update(redesigned=True, solution=sol.to_dict(), certificate=rep.to_dict(),
                          initial_delta0=rep0.delta0)
            self._write_json("phase3.json", record)
            return sol, rep
        record.update(redesigned=False, reason="redesign infeasible or not certified; initial gain kept",
                      status=sol.status, kappa0=sol.kappa0, certificate=rep.to_dict())
        self._write_json("phase3.json", record)
        return None, None

    def simulate(self, which):
        scn = self.scn
        sol0, _ = self.load_phase1()
        if which == "initial":
            L, p = sol0.L, (np.zeros(scn.template.n_p) if scn.learning.p0 is None else scn.learning.p0)
        elif which == "learned":
            L, p = sol0.L, self.load_learning()
        elif which == "redesigned":
            p = self.load_learning()
            sol3, _ = self.load_phase3()
            L = sol0.L if sol3 is None else sol3.L
        else:
            raise PhaseFailure(EXIT_CONFIG, f"unknown trajectory {which!r}")
        obs = ObserverConfig(L, scn.template.with_coefficients(p, enforce_bound=False), scn.xhat0)
        try:
            tr = simulate(scn.sys, obs, scn.x0, scn.T, u_seq=scn.u)
        except DivergenceError as exc:
            raise PhaseFailure(EXIT_DIVERGENCE, str(exc)) from None
        self._write(f"traj_{which}.csv", tr.to_csv())
        energy = tr.output_error_energy(scn.sys.C)
        return energy, tr

    def summary(self, energies, notes=()):
        lines = ["# Run summary", "", f"- seed: {self.cfg.seed}", f"- config hash: `{config_hash(self.cfg)}`"]
        lines += [f"- {n}" for n in notes]
        lines += ["", "| trajectory | output-error energy | final error norm |", "|---|---|---|"]
        for name in ("initial", "learned", "redesigned"):
            if name in energies:
                e, tr = energies[name]
                lines.append(f"| {name} | {e:.6g} | {tr.errnorm[-1]:.6g} |")
            else:
                lines.append(f"| {name} | not available | |")
        self._write("summary.md", "\n".join(lines) + "\n")


def reproduce(cfg, out_dir):
    """All phases in order; returns an exit code and writes ``summary.md``."""
    runner = Runner(cfg, out_dir)
    energies, notes = {}, []
    code = EXIT_OK
    try:
        lip, sol, rep = runner.design_initial()
        notes.append(f"initial design: Lipschitz estimate {lip:.6g}, gain {np.ravel(sol.L).tolist()}, "
                     f"spectral radius {rep.schur_radius:.6g}")
        energies["initial"] = runner.simulate("initial")
        p_inf, state = runner.learn()
        notes.append(f"learning: {state.iteration} iterations, stop reason {state.reason}, "
                     f"p_inf {p_inf.tolist()}")
        sol3, rep3 = runner.redesign()
        if sol3 is None:
            notes.append("redesign: not certified, initial gain kept")
        else:
            notes.append(f"redesign: gain {np.ravel(sol3.L).tolist()}, delta0 {rep3.delta0:.6g}")
        energies["learned"] = runner.simulate("learned")
        energies["redesigned"] = runner.simulate("redesigned")
    except PhaseFailure as exc:
        code = exc.code
        notes.append(f"aborted (exit {exc.code}): {exc}")
    runner.summary(energies, notes)
    return code, runner


def run_command(command, cfg, out_dir, which="all"):
    """Dispatch one CLI command; returns the process exit code."""
    try:
        if command == "reproduce-vdp":
            return reproduce(cfg, out_dir)[0]
        runner = Runner(cfg, out_dir)
        if command == "design-initial":
            lip, sol, rep = runner.design_initial()
            print(f"Lipschitz estimate {lip:.6g}; gain L = {np.ravel(sol.L).tolist()}; "
                  f"certificate passed = {rep.passed}")
        elif command == "learn":
            p_inf, state = runner.learn()
            print(f"learning finished after {state.iteration} iterations ({state.reason}); p_inf = {p_inf.tolist()}")
        elif command == "redesign":
            sol, rep = runner.redesign()
            if sol is None:
                print("redesign not certified; initial gain kept")
            else:
                print(f"redesigned gain L = {np.ravel(sol.L).tolist()}; delta0 = {rep.delta0:.6g}")
        elif command == "simulate":
            names = ("initial", "learned", "redesigned") if which == "all" else (which,)
            for name in names:
                energy, tr = runner.simulate(name)
                print(f"{name}: output-error energy {energy:.6g}, final error norm {tr.errnorm[-1]:.6g}")
        else:
            raise PhaseFailure(EXIT_CONFIG, f"unknown command {command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}")
        return EXIT_CONFIG
    except PhaseFailure as exc:
        print(f"error: {exc}")
        return exc.code
    return EXIT_OK
