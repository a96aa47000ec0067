"""Small dense semidefinite programs.

Problems are assembled with :class:`SdpProblem`, whose variables are
:class:`Affine` matrix expressions.  Every constraint becomes one
block of a block-diagonal linear matrix inequality, so the whole problem
has the form::

    minimize    c^T x
    subject to  F_k(x) = F_k0 + sum_i x_i F_ki  >= 0   (k = 1..K)

which is solved by an infeasible-start primal-dual interior-point method
with Nesterov-Todd scaling and a Mehrotra predictor-corrector step.
Sizes are desk scale (tens of unknowns, blocks of dimension < 20), so the
Schur complement is formed densely.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidInputError
from .numerics import DEFAULT_NUMERICS

log = logging.getLogger(__name__)


class Affine:
    """Matrix-valued affine function of the problem's scalar unknowns.

    ``const`` is an ``(r, c)`` array and ``coef`` maps an unknown's index
    to its ``(r, c)`` coefficient matrix.
    """

    __array_priority__ = 100

    def __init__(self, const, coef=None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.coef = {} if coef is None else coef

    @property
    def shape(self):
        return self.const.shape

    @classmethod
    def constant(cls, value):
        return cls(np.atleast_2d(np.asarray(value, dtype=float)).copy())

    def _lift(self, other):
        if isinstance(other, Affine):
            return other
        other = np.asarray(other, dtype=float)
        if other.ndim == 0:
            other = np.full(self.shape, float(other))
        return Affine.constant(other)

    def __add__(self, other):
        other = self._lift(other)
        if other.shape != self.shape:
            raise InvalidInputError(f"shape mismatch {self.shape} + {other.shape}")
        coef = {k: v.copy() for k, v in self.coef.items()}
        for k, v in other.coef.items():
            coef[k] = coef[k] + v if k in coef else v.copy()
        return Affine(self.const + other.const, coef)

    __radd__ = __add__

    def __neg__(self):
        return Affine(-self.const, {k: -v for k, v in self.coef.items()})

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, Affine):
            raise InvalidInputError("product of two affine expressions is not affine")
        other = np.asarray(other, dtype=float)
        if other.ndim == 0:
            s = float(other)
            return Affine(self.const * s, {k: v * s for k, v in self.coef.items()})
        if self.shape != (1, 1):
            raise InvalidInputError("only 1x1 expressions broadcast against a matrix")
        m = np.atleast_2d(other)
        return Affine(self.const[0, 0] * m, {k: v[0, 0] * m for k, v in self.coef.items()})

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, Affine):
            raise InvalidInputError("product of two affine expressions is not affine")
        m = np.atleast_2d(np.asarray(other, dtype=float))
        return Affine(self.const @ m, {k: v @ m for k, v in self.coef.items()})

    def __rmatmul__(self, other):
        m = np.atleast_2d(np.asarray(other, dtype=float))
        return Affine(m @ self.const, {k: m @ v for k, v in self.coef.items()})

    @property
    def T(self):
        return Affine(self.const.T.copy(), {k: v.T.copy() for k, v in self.coef.items()})

    def vec(self):
        """Row-major column vector of the entries."""
        n = self.const.size
        return Affine(self.const.reshape(n, 1), {k: v.reshape(n, 1) for k, v in self.coef.items()})

    def value(self, x):
        out = self.const.copy()
        for k, v in self.coef.items():
            out += x[k] * v
        return out

    def __getitem__(self, idx):
        c = self.const[idx]
        return Affine(np.atleast_2d(c), {k: np.atleast_2d(v[idx]) for k, v in self.coef.items()})


def bmat(rows):
    """Assemble a block matrix from Affine / array entries.

    ``None`` or ``0`` entries become zero blocks whose size is inferred
    from the other blocks in the same row and column.
    """
    nr, nc = len(rows), len(rows[0])
    if any(len(r) != nc for r in rows):
        raise InvalidInputError("ragged block matrix")
    heights = [None] * nr
    widths = [None] * nc
    for i, r in enumerate(rows):
        for j, e in enumerate(r):
            if e is None or (np.isscalar(e) and e == 0):
                continue
            shp = e.shape if isinstance(e, Affine) else np.atleast_2d(e).shape
            for store, idx, val in ((heights, i, shp[0]), (widths, j, shp[1])):
                if store[idx] is None:
                    store[idx] = val
                elif store[idx] != val:
                    raise InvalidInputError(f"inconsistent block sizes at ({i}, {j})")
    if None in heights or None in widths:
        raise InvalidInputError("cannot infer size of an all-zero block row/column")
    total = Affine(np.zeros((sum(heights), sum(widths))))
    r0 = 0
    for i, r in enumerate(rows):
        c0 = 0
        for j, e in enumerate(r):
            if not (e is None or (np.isscalar(e) and e == 0)):
                e = e if isinstance(e, Affine) else Affine.constant(e)
                total.const[r0:r0 + heights[i], c0:c0 + widths[j]] += e.const
                for k, v in e.coef.items():
                    if k not in total.coef:
                        total.coef[k] = np.zeros(total.shape)
                    total.coef[k][r0:r0 + heights[i], c0:c0 + widths[j]] += v
            c0 += widths[j]
        r0 += heights[i]
    return total


@dataclass
class Variable:
    name: str
    kind: str  # "scalar", "symmetric" or "matrix"
    shape: tuple
    offset: int
    size: int


@dataclass
class Block:
    name: str
    expr: Affine
    sense: str  # "psd" (expr >= 0) or "nsd" (expr <= 0)
    scalar: bool = False

    def as_psd(self):
        return self.expr if self.sense == "psd" else -self.expr


@dataclass
class SdpResult:
    status: str  # "optimal", "infeasible" or "max-iterations"
    x: np.ndarray
    values: dict
    objective: float
    dual_objective: float
    gap: float
    primal_residual: float
    dual_residual: float
    iterations: int
    infeasibility: float = 0.0
    block_min_eigs: dict = field(default_factory=dict)
    message: str = ""

    def __getitem__(self, name):
        return self.values[name]


class SdpProblem:
    """Container for variables, LMI blocks, scalar constraints and a linear objective."""

    def __init__(self, name="sdp"):
        self.name = name
        self.variables = []
        self.blocks = []
        self.n = 0
        self.objective = Affine(np.zeros((1, 1)))

    def _new(self, name, kind, shape, size):
        if any(v.name == name for v in self.variables):
            raise InvalidInputError(f"duplicate variable {name!r}")
        var = Variable(name, kind, tuple(shape), self.n, size)
        self.variables.append(var)
        self.n += size
        return var

    def scalar(self, name):
        var = self._new(name, "scalar", (1, 1), 1)
        return Affine(np.zeros((1, 1)), {var.offset: np.ones((1, 1))})

    def symmetric(self, name, dim):
        var = self._new(name, "symmetric", (dim, dim), dim * (dim + 1) // 2)
        expr = Affine(np.zeros((dim, dim)))
        k = var.offset
        for i in range(dim):
            for j in range(i, dim):
                e = np.zeros((dim, dim))
                e[i, j] = e[j, i] = 1.0
                expr.coef[k] = e
                k += 1
        return expr

    def matrix(self, name, rows, cols):
        var = self._new(name, "matrix", (rows, cols), rows * cols)
        expr = Affine(np.zeros((rows, cols)))
        k = var.offset
        for i in range(rows):
            for j in range(cols):
                e = np.zeros((rows, cols))
                e[i, j] = 1.0
                expr.coef[k] = e
                k += 1
        return expr

    def add_lmi(self, expr, sense="psd", name=None, tol=1e-10):
        if sense not in ("psd", "nsd"):
            raise InvalidInputError(f"unknown LMI sense {sense!r}")
        expr = expr if isinstance(expr, Affine) else Affine.constant(expr)
        r, c = expr.shape
        if r != c:
            raise InvalidInputError(f"LMI block must be square, got {expr.shape}")
        scale = 1.0 + max([np.max(np.abs(expr.const))] + [np.max(np.abs(v)) for v in expr.coef.values()])
        for m in [expr.const, *expr.coef.values()]:
            if np.max(np.abs(m - m.T)) > tol * scale:
                raise InvalidInputError(f"LMI block {name or len(self.blocks)} is not symmetric")
        sym = Affine(0.5 * (expr.const + expr.const.T), {k: 0.5 * (v + v.T) for k, v in expr.coef.items()})
        self.blocks.append(Block(name or f"block{len(self.blocks)}", sym, sense))

    def add_scalar(self, expr, sense="<=", rhs=0.0, name=None):
        """Linear scalar constraint ``expr <sense> rhs`` with sense ``<=`` or ``>=``."""
        if expr.shape != (1, 1):
            raise InvalidInputError("scalar constraint needs a 1x1 expression")
        if sense == "<=":
            block = Block(name or f"scalar{len(self.blocks)}", expr - rhs, "nsd", scalar=True)
        elif sense == ">=":
            block = Block(name or f"scalar{len(self.blocks)}", expr - rhs, "psd", scalar=True)
        else:
            raise InvalidInputError(f"unsupported scalar sense {sense!r}")
        self.blocks.append(block)

    def minimize(self, expr):
        if expr.shape != (1, 1):
            raise InvalidInputError("objective must be a 1x1 expression")
        self.objective = expr

    # -- standard form -------------------------------------------------

    def standard_form(self):
        """Return ``(c, c0, [(F0, Fi)])`` with every block in ``>= 0`` form."""
        c = np.zeros(self.n)
        for k, v in self.objective.coef.items():
            c[k] = v[0, 0]
        blocks = []
        for b in self.blocks:
            e = b.as_psd()
            dim = e.shape[0]
            Fi = np.zeros((self.n, dim, dim))
            for k, v in e.coef.items():
                Fi[k] = v
            blocks.append((e.const.copy(), Fi))
        return c, float(self.objective.const[0, 0]), blocks

    def unpack(self, x):
        out = {}
        for v in self.variables:
            seg = x[v.offset:v.offset + v.size]
            if v.kind == "scalar":
                out[v.name] = float(seg[0])
            elif v.kind == "symmetric":
                dim = v.shape[0]
                m = np.zeros((dim, dim))
                m[np.triu_indices(dim)] = seg
                out[v.name] = m + np.triu(m, 1).T
            else:
                out[v.name] = seg.reshape(v.shape).copy()
        return out

    def block_min_eigs(self, x):
        return {b.name: float(np.linalg.eigvalsh(b.as_psd().value(x))[0]) for b in self.blocks}

    def solve(self, numerics=DEFAULT_NUMERICS):
        if self.n == 0:
            raise InvalidInputError("problem has no variables")
        if self.n > numerics.max_variables:
            raise InvalidInputError(f"{self.n} unknowns exceeds the cap of {numerics.max_variables}")
        c, c0, blocks = self.standard_form()
        res = interior_point(c, blocks, max_iter=numerics.max_newton_steps)
        x = res["x"]
        eigs = self.block_min_eigs(x)
        status = res["status"]
        message = res["message"]
        if status == "optimal":
            scalar_worst = min([eigs[b.name] for b in self.blocks if b.scalar], default=0.0)
            lmi_worst = min([eigs[b.name] for b in self.blocks if not b.scalar], default=0.0)
            if lmi_worst < -numerics.lmi_eig_tol or scalar_worst < -numerics.scalar_tol:
                status = "max-iterations"
                message = f"post-check failed: worst block eigenvalue {min(lmi_worst, scalar_worst):.3e}"
        infeas = 0.0
        if status == "infeasible":
            infeas = feasibility_margin(blocks)
        return SdpResult(
            status=status,
            x=x,
            values=self.unpack(x),
            objective=float(c @ x + c0),
            dual_objective=float(res["dual_objective"] + c0),
            gap=float(res["gap"]),
            primal_residual=float(res["primal_residual"]),
            dual_residual=float(res["dual_residual"]),
            iterations=int(res["iterations"]),
            infeasibility=infeas,
            block_min_eigs=eigs,
            message=message,
        )

    # -- serialization ---------------------------------------------------

    def to_dict(self):
        def expr_dict(e):
            return {
                "constant": e.const.tolist(),
                "coefficients": {str(k): v.tolist() for k, v in sorted(e.coef.items())},
            }

        return {
            "name": self.name,
            "variables": [
                {"name": v.name, "kind": v.kind, "shape": list(v.shape), "offset": v.offset, "size": v.size}
                for v in self.variables
            ],
            "blocks": [
                {"name": b.name, "sense": b.sense, "scalar": b.scalar, **expr_dict(b.expr)} for b in self.blocks
            ],
            "objective": expr_dict(self.objective),
        }

    @classmethod
    def from_dict(cls, d):
        prob = cls(d.get("name", "sdp"))
        for v in d["variables"]:
            if v["kind"] == "scalar":
                prob.scalar(v["name"])
            elif v["kind"] == "symmetric":
                prob.symmetric(v["name"], v["shape"][0])
            elif v["kind"] == "matrix":
                prob.matrix(v["name"], *v["shape"])
            else:
                raise InvalidInputError(f"unknown variable kind {v['kind']!r}")

        def expr(e):
            return Affine(
                np.array(e["constant"], dtype=float),
                {int(k): np.array(m, dtype=float) for k, m in e["coefficients"].items()},
            )

        for b in d["blocks"]:
            prob.blocks.append(Block(b["name"], expr(b), b["sense"], bool(b.get("scalar", False))))
        prob.objective = expr(d["objective"])
        return prob


# -- interior-point core -------------------------------------------------------


def _apply(Fi, x):
    return np.tensordot(x, Fi, axes=1)


def _adjoint(Fi, Z):
    return np.tensordot(Fi, Z, axes=([1, 2], [0, 1]))


def _sym(m):
    return 0.5 * (m + m.T)


def _max_step(L, D):
    """Largest alpha with L L^T + alpha D >= 0, given the Cholesky factor L."""
    Li = np.linalg.inv(L)
    ev = np.linalg.eigvalsh(_sym(Li @ D @ Li.T))
    lo = ev[0]
    return np.inf if lo >= 0 else -1.0 / lo


def _initial_point(c, G, H):
    """Least-squares start shifted into the interior of the cone (cvxopt-style)."""
    m = c.size
    Gmat = np.vstack([g.reshape(m, -1).T for g in G])  # stacked vec(G_i)
    hvec = np.concatenate([h.ravel() for h in H])
    x, *_ = np.linalg.lstsq(Gmat, hvec, rcond=None)
    s_raw = hvec - Gmat @ x
    # least-norm z with G^T z = -c
    z_raw, *_ = np.linalg.lstsq(Gmat.T, -c, rcond=None)

    def split(v):
        out, k = [], 0
        for h in H:
            n = h.shape[0]
            out.append(_sym(v[k:k + n * n].reshape(n, n)))
            k += n * n
        return out

    S, Z = split(s_raw), split(z_raw)
    a_s = min(np.linalg.eigvalsh(s)[0] for s in S)
    a_z = min(np.linalg.eigvalsh(z)[0] for z in Z)
    scale = max(1.0, np.linalg.norm(hvec), np.linalg.norm(c)) ** 0.5
    S = [s + (max(0.0, -a_s) + scale) * np.eye(s.shape[0]) for s in S]
    Z = [z + (max(0.0, -a_z) + scale) * np.eye(z.shape[0]) for z in Z]
    return x, S, Z


def _schur_solver(Gs):
    """Solver for ``(Gs Gs^T) dx = b`` via QR of ``Gs^T`` with iterative refinement.

    Avoids forming the Schur matrix, whose condition number is the square
    of that of ``Gs`` and degrades quickly near the optimum.
    """
    R = np.linalg.qr(Gs.T, mode="r")
    d = np.abs(np.diag(R))
    if d.size == 0 or d.min() <= 1e-14 * d.max():
        pinv = np.linalg.pinv(Gs.T)

        def solve(b):
            return pinv @ (pinv.T @ b)
        return solve

    def base(b):
        y = solve_triangular(R, b, trans="T")
        return solve_triangular(R, y)

    def solve(b):
        x = base(b)
        for _ in range(2):
            x = x + base(b - Gs @ (Gs.T @ x))
        return x
    return solve


def interior_point(c, blocks, max_iter=200, feas_tol=1e-10, gap_tol=1e-9, step_frac=0.98):
    """Primal-dual NT interior point for ``min c^T x s.t. F0_k + sum x_i F_ki >= 0``.

    Internally uses ``G_k = -F_k``, ``H_k = F0_k`` so that the slack is
    ``S_k = H_k - G_k(x)`` and the dual is ``max -<H, Z> s.t. G^T(Z) + c = 0``.
    """
    c = np.asarray(c, dtype=float)
    m = c.size
    H = [np.asarray(F0, dtype=float) for F0, _ in blocks]
    G = [-np.asarray(Fi, dtype=float) for _, Fi in blocks]
    nu = sum(h.shape[0] for h in H)
    h_norm = 1.0 + np.sqrt(sum(np.sum(h * h) for h in H))
    c_norm = 1.0 + np.linalg.norm(c)

    x, S, Z = _initial_point(c, G, H)
    best = None
    status, message = "max-iterations", "iteration limit reached"
    it = 0
    for it in range(1, max_iter + 1):
        rp = [h - s - _apply(g, x) for h, s, g in zip(H, S, G)]
        rd = c + sum(_adjoint(g, z) for g, z in zip(G, Z))
        gap = sum(float(np.sum(s * z)) for s, z in zip(S, Z))
        mu = gap / nu
        pobj = float(c @ x)
        dobj = -sum(float(np.sum(h * z)) for h, z in zip(H, Z))
        pres = np.sqrt(sum(np.sum(r * r) for r in rp)) / h_norm
        dres = np.linalg.norm(rd) / c_norm
        record = dict(x=x.copy(), primal_residual=pres, dual_residual=dres, gap=gap,
                      objective=pobj, dual_objective=dobj, iterations=it)
        if pres <= 1e-7 and dres <= 1e-7 and (best is None or gap < best["gap"] or
                                               best["primal_residual"] > 1e-7):
            best = record
        if pres <= feas_tol and dres <= feas_tol and gap <= gap_tol * max(1.0, abs(pobj)):
            status, message = "optimal", "converged"
            best = record
            break
        # primal infeasibility certificate: Z >= 0, G^T Z ~ 0, <H, Z> < 0
        hz = sum(float(np.sum(h * z)) for h, z in zip(H, Z))
        gz = np.linalg.norm(sum(_adjoint(g, z) for g, z in zip(G, Z)))
        if hz < 0 and gz <= 1e-8 * (-hz) and -hz > 1e-8 * max(1.0, sum(np.trace(z) for z in Z)):
            status, message = "infeasible", "primal infeasibility certificate found"
            break
        try:
            LS = [np.linalg.cholesky(s) for s in S]
            LZ = [np.linalg.cholesky(z) for z in Z]
        except np.linalg.LinAlgError:
            message = "lost positive definiteness"
            break
        R, Rinv, lam = [], [], []
        for ls, lz in zip(LS, LZ):
            U, sv, Vt = np.linalg.svd(lz.T @ ls)
            r = ls @ Vt.T @ np.diag(sv ** -0.5)
            R.append(r)
            Rinv.append(np.linalg.inv(r))
            lam.append(sv)
        Gh = [np.einsum("ab,ibc,dc->iad", ri, g, ri) for ri, g in zip(Rinv, G)]
        Gs = np.concatenate([gh.reshape(m, -1) for gh in Gh], axis=1)
        msolve = _schur_solver(Gs)
        rph = [ri @ r @ ri.T for ri, r in zip(Rinv, rp)]

        def direction(T):
            rhs = -rd - sum(_adjoint(gh, t - r) for gh, t, r in zip(Gh, T, rph))
            dx = msolve(rhs)
            Dx, Dz = [], []
            for gh, t, r in zip(Gh, T, rph):
                dxs = r - _apply(gh, dx)  # scaled Delta S
                Dx.append(_sym(dxs))
                Dz.append(_sym(t - dxs))
            return dx, Dx, Dz

        def steps(Dx, Dz):
            ap = az = np.inf
            for l, dx_, dz_ in zip(lam, Dx, Dz):
                ap = min(ap, _max_step(np.diag(l ** 0.5), dx_))
                az = min(az, _max_step(np.diag(l ** 0.5), dz_))
            return ap, az

        # predictor
        Ta = [-np.diag(l) for l in lam]
        dxa, Dxa, Dza = direction(Ta)
        ap, az = steps(Dxa, Dza)
        ap = az = min(1.0, ap, az)
        mu_aff = sum(float(np.sum((np.diag(l) + ap * dx_) * (np.diag(l) + az * dz_)))
                     for l, dx_, dz_ in zip(lam, Dxa, Dza)) / nu
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0
        # corrector
        Tc = []
        for l, dx_, dz_ in zip(lam, Dxa, Dza):
            Cm = dx_ @ dz_ + dz_ @ dx_
            denom = l[:, None] + l[None, :]
            Tc.append((2.0 * sigma * mu * np.eye(l.size) - 2.0 * np.diag(l ** 2) - Cm) / denom)
        dx, Dx, Dz = direction(Tc)
        ap, az = steps(Dx, Dz)
        # common step keeps infeasibility and complementarity shrinking together
        ap = az = min(1.0, step_frac * min(ap, az))
        x = x + ap * dx
        S = [_sym(s + ap * (r @ d @ r.T)) for s, r, d in zip(S, R, Dx)]
        Z = [_sym(z + az * (ri.T @ d @ ri)) for z, ri, d in zip(Z, Rinv, Dz)]
        if ap < 1e-12 and az < 1e-12:
            message = "step length collapsed"
            break
    else:
        it = max_iter

    if status != "optimal" and status != "infeasible":
        if best is not None and best["gap"] <= 1e-7 * max(1.0, abs(best["objective"])) \
                and best["primal_residual"] <= 1e-9 and best["dual_residual"] <= 1e-8:
            status, message = "optimal", f"accepted near-optimal iterate ({message})"
        elif best is not None:
            x = best["x"]
    if status == "optimal" and best is not None:
        return dict(status=status, message=message, **best)
    rp = [h - s - _apply(g, x) for h, s, g in zip(H, S, G)]
    rd = c + sum(_adjoint(g, z) for g, z in zip(G, Z))
    return dict(
        status=status, message=message, x=x, iterations=it,
        primal_residual=np.sqrt(sum(np.sum(r * r) for r in rp)) / h_norm,
        dual_residual=np.linalg.norm(rd) / c_norm,
        gap=sum(float(np.sum(s * z)) for s, z in zip(S, Z)),
        objective=float(c @ x),
        dual_objective=-sum(float(np.sum(h * z)) for h, z in zip(H, Z)),
    )


def feasibility_margin(blocks, max_iter=200):
    """Smallest ``t`` such that ``F_k(x) + t I >= 0`` is feasible (``t >= -1``).

    A positive value measures how far the LMI system is from feasibility.
    """
    m = blocks[0][1].shape[0]
    aug = []
    for F0, Fi in blocks:
        n = F0.shape[0]
        Fi2 = np.concatenate([Fi, np.eye(n)[None]], axis=0)
        aug.append((F0, Fi2))
    aug.append((np.ones((1, 1)), np.concatenate([np.zeros((m, 1, 1)), np.ones((1, 1, 1))], axis=0)))
    c = np.zeros(m + 1)
    c[-1] = 1.0
    res = interior_point(c, aug, max_iter=max_iter)
    return float(res["x"][-1])
