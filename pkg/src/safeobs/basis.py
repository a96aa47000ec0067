"""Basis functions psi: R^nq -> R^np for the learned nonlinearity.

Each basis function is either a multivariate polynomial (a list of
``(coefficient, exponents)`` monomials) or a named analytic function of a
single coordinate (``sin``, ``cos``, ``tanh``; ``abs`` is accepted but has
no gradient).  The whole vector is multiplied by ``scale``.
"""

import numpy as np

from .errors import InvalidInputError, UnsupportedError

_UNARY = {
    "sin": (np.sin, np.cos),
    "cos": (np.cos, lambda x: -np.sin(x)),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "abs": (np.abs, None),
}


class Basis:
    """Vector of basis functions with analytic Jacobian.

    Parameters
    ----------
    terms : list of dict
        ``{"type": "polynomial", "monomials": [[c, [e1, ..., e_nq]], ...]}``
        or ``{"type": "function", "name": "tanh", "index": i}``.
    n_q : int
        Input dimension.
    scale : float
        Common multiplier applied to every entry.
    """

    def __init__(self, terms, n_q, scale=1.0, name=None):
        if n_q < 1:
            raise InvalidInputError("n_q must be positive")
        if not terms:
            raise InvalidInputError("basis needs at least one term")
        self.terms = [dict(t) for t in terms]
        self.n_q = int(n_q)
        self.scale = float(scale)
        self.name = name
        exps, rows = [], []
        self._funcs = []
        for i, t in enumerate(self.terms):
            kind = t.get("type")
            if kind == "polynomial":
                for c, e in t["monomials"]:
                    e = tuple(int(v) for v in e)
                    if len(e) != self.n_q or min(e) < 0:
                        raise InvalidInputError(f"term {i}: bad exponent vector {e}")
                    exps.append(e)
                    rows.append((i, float(c)))
            elif kind == "function":
                fname, idx = t.get("name"), int(t.get("index", 0))
                if fname not in _UNARY:
                    raise InvalidInputError(f"term {i}: unknown function {fname!r}")
                if not 0 <= idx < self.n_q:
                    raise InvalidInputError(f"term {i}: index {idx} out of range")
                self._funcs.append((i, fname, idx))
            else:
                raise InvalidInputError(f"term {i}: unknown type {kind!r}")
        uniq = sorted(set(exps))
        pos = {e: k for k, e in enumerate(uniq)}
        self._exps = np.array(uniq, dtype=int).reshape(len(uniq), self.n_q)
        self._coef = np.zeros((len(self.terms), len(uniq)))
        for e, (i, c) in zip(exps, rows):
            self._coef[i, pos[e]] += c

    @property
    def n_p(self):
        return len(self.terms)

    @property
    def differentiable(self):
        return all(_UNARY[f][1] is not None for _, f, _ in self._funcs)

    def _check(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.n_q:
            raise InvalidInputError(f"expected {self.n_q} inputs, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise InvalidInputError("non-finite basis input")
        return q

    def _monomials(self, q):
        # q: (N, nq) -> (N, K)
        return np.prod(q[:, None, :] ** self._exps[None, :, :], axis=2)

    def eval_batch(self, q):
        """Evaluate at ``N`` points; ``q`` has shape ``(N, n_q)``, result ``(N, n_p)``."""
        q = np.atleast_2d(self._check(q))
        out = self._monomials(q) @ self._coef.T if self._exps.size else np.zeros((q.shape[0], self.n_p))
        for i, fname, idx in self._funcs:
            out[:, i] = _UNARY[fname][0](q[:, idx])
        return self.scale * out

    def __call__(self, q):
        return self.eval_batch(np.reshape(q, (1, -1)))[0]

    def jacobian_batch(self, q):
        """Jacobians at ``N`` points, shape ``(N, n_p, n_q)``."""
        if not self.differentiable:
            raise UnsupportedError("basis contains a non-differentiable function")
        q = np.atleast_2d(self._check(q))
        n = q.shape[0]
        jac = np.zeros((n, self.n_p, self.n_q))
        if self._exps.size:
            for d in range(self.n_q):
                e = self._exps.copy()
                k = e[:, d].astype(float)
                e[:, d] = np.maximum(e[:, d] - 1, 0)
                dmono = k[None, :] * np.prod(q[:, None, :] ** e[None, :, :], axis=2)
                jac[:, :, d] = dmono @ self._coef.T
        for i, fname, idx in self._funcs:
            jac[:, i, :] = 0.0
            jac[:, i, idx] = _UNARY[fname][1](q[:, idx])
        return self.scale * jac

    def jacobian(self, q):
        return self.jacobian_batch(np.reshape(q, (1, -1)))[0]

    def to_dict(self):
        return {"n_q": self.n_q, "scale": self.scale, "terms": self.terms, "name": self.name}

    @classmethod
    def from_dict(cls, d):
        if "preset" in d:
            return preset(d["preset"], **{k: v for k, v in d.items() if k != "preset"})
        return cls(d["terms"], d["n_q"], d.get("scale", 1.0), d.get("name"))


def monomial(exponents, coefficient=1.0):
    return {"type": "polynomial", "monomials": [[coefficient, list(exponents)]]}


def identity_basis(n_q):
    terms = [monomial([1 if j == i else 0 for j in range(n_q)]) for i in range(n_q)]
    return Basis(terms, n_q, name="identity")


def vdp_legendre_basis():
    """Five products of Legendre-type polynomials in two inputs, scaled by 10."""
    terms = [
        # (3a^2 - 1)(3b^2 - 1)
        {"type": "polynomial", "monomials": [[9, [2, 2]], [-3, [2, 0]], [-3, [0, 2]], [1, [0, 0]]]},
        # (3a^2 - 1) b
        {"type": "polynomial", "monomials": [[3, [2, 1]], [-1, [0, 1]]]},
        # a (3b^2 - 1)
        {"type": "polynomial", "monomials": [[3, [1, 2]], [-1, [1, 0]]]},
        # 5a^3 - 3a
        {"type": "polynomial", "monomials": [[5, [3, 0]], [-3, [1, 0]]]},
        # 5b^3 - 3b
        {"type": "polynomial", "monomials": [[5, [0, 3]], [-3, [0, 1]]]},
    ]
    return Basis(terms, 2, scale=10.0, name="vdp_legendre")


def tanh_basis(n_q):
    """``tanh`` of each input; bounded, so simulations cannot blow up through the model."""
    return Basis([{"type": "function", "name": "tanh", "index": i} for i in range(n_q)], n_q,
                 name="tanh")


_PRESETS = {
    "identity": identity_basis,
    "vdp_legendre": lambda: vdp_legendre_basis(),
    "tanh": tanh_basis,
}


def preset(name, **kwargs):
    if name not in _PRESETS:
        raise InvalidInputError(f"unknown basis preset {name!r}; choose from {sorted(_PRESETS)}")
    return _PRESETS[name](**kwargs)
