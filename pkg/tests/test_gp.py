"""Gaussian-process kernels, posterior, likelihood and hyperparameter search."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import check_grad

from oracles import gp_explicit, lml_explicit, matern52_kernel, se_kernel
from safeobs import gp
from safeobs.errors import IllConditionedGramError, InvalidInputError


def _se(s0=1.0, ls=(1.0,), jitter=0.0):
    return gp.KernelSpec("se", s0, ls, jitter)


def _m52(s0=1.0, ls=(1.0,), jitter=0.0, square=False):
    return gp.KernelSpec("matern52", s0, ls, jitter, square)


# ---------------------------------------------------------------- kernels

def test_se_at_zero_distance():
    assert gp.kernel_eval(_se(1.7), [0.3, 0.1], [0.3, 0.1]) == pytest.approx(1.7 ** 2, rel=1e-15)


def test_matern_at_zero_distance_uses_printed_prefactor():
    assert gp.kernel_eval(_m52(1.7), [0.3], [0.3]) == pytest.approx(1.7, rel=1e-15)
    assert gp.kernel_eval(_m52(1.7, square=True), [0.3], [0.3]) == pytest.approx(1.7 ** 2, rel=1e-15)


def test_se_value_at_sqrt_two():
    assert gp.kernel_eval(_se(), [0.0, 0.0], [1.0, 1.0]) == pytest.approx(math.exp(-1.0), rel=1e-14)
    assert gp.kernel_eval(_se(), [0.0, 0.0], [1.0, 1.0]) == pytest.approx(0.367879, abs=1e-6)


vec3 = st.lists(st.floats(-3, 3), min_size=3, max_size=3)


@given(vec3, vec3, st.floats(0.1, 3), st.lists(st.floats(0.1, 3), min_size=3, max_size=3))
def test_kernels_match_direct_formulas_and_are_symmetric(p, q, s0, ls):
    se = gp.KernelSpec("se", s0, tuple(ls), 0.0)
    m52 = gp.KernelSpec("matern52", s0, tuple(ls), 0.0)
    assert gp.kernel_eval(se, p, q) == pytest.approx(se_kernel(p, q, s0, ls), rel=1e-12, abs=1e-300)
    assert gp.kernel_eval(m52, p, q) == pytest.approx(matern52_kernel(p, q, s0, ls), rel=1e-12, abs=1e-300)
    assert gp.kernel_eval(se, p, q) == gp.kernel_eval(se, q, p)
    assert gp.kernel_eval(m52, p, q) == gp.kernel_eval(m52, q, p)


@settings(max_examples=20)
@given(st.integers(1, 10), st.integers(2, 50), st.sampled_from(["se", "matern52"]), st.integers(0, 2 ** 31))
def test_kernel_matrices_are_psd(dim, n, kind, seed):
    r = np.random.default_rng(seed)
    X = r.uniform(-1, 1, size=(n, dim))
    spec = gp.KernelSpec(kind, float(r.uniform(0.2, 3)), tuple(r.uniform(0.1, 2, size=dim)), 0.0)
    K = gp.kernel_matrix(spec, X)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-8


@pytest.mark.parametrize("kw", [{"sigma0": 0.0}, {"lengthscales": (-1.0,)}, {"jitter": -1.0}, {"kind": "rbf"}])
def test_kernel_spec_validation(kw):
    args = {"kind": "se", "sigma0": 1.0, "lengthscales": (1.0,), "jitter": 0.0}
    args.update(kw)
    with pytest.raises(InvalidInputError):
        gp.KernelSpec(**args)


# ---------------------------------------------------------------- fit / predict

def test_one_point_interpolation():
    m = gp.fit([[0.2, -0.4]], [3.0], _m52(2.0))
    mu, var = m.predict([0.2, -0.4])
    assert mu == pytest.approx(3.0, abs=1e-9)
    assert var == pytest.approx(0.0, abs=1e-9)


def test_two_points_match_direct_solve():
    X = np.array([[0.0], [0.7]])
    y = np.array([1.0, -2.0])
    spec = _se(1.3, (0.5,))
    k = lambda a, b: se_kernel(a, b, 1.3, [0.5])  # noqa: E731
    K = np.array([[k(X[i], X[j]) for j in range(2)] for i in range(2)])
    m = gp.fit(X, y, spec)
    for p in ([0.3], [1.5], [-0.2]):
        ks = np.array([k(p, X[0]), k(p, X[1])])
        mu_ref = ks @ np.linalg.solve(K, y)
        var_ref = k(p, p) - ks @ np.linalg.solve(K, ks)
        mu, var = m.predict(p)
        assert mu == pytest.approx(mu_ref, abs=1e-10)
        assert var == pytest.approx(var_ref, abs=1e-10)


def test_duplicate_inputs_need_jitter():
    X = [[0.5], [0.5]]
    with pytest.raises(IllConditionedGramError):
        gp.fit(X, [1.0, 1.0], _se(jitter=0.0))
    m = gp.fit(X, [1.0, 1.0], _se(jitter=1e-10))
    assert m.jitter_used > 0


def test_training_targets_reproduced(rng):
    X = rng.uniform(-1, 1, size=(12, 3))
    y = rng.normal(size=12)
    spec = _m52(1.0, (0.6, 0.8, 1.1), jitter=1e-10)
    m = gp.fit(X, y, spec)
    mu, var = m.predict_batch(X)
    tol = max(1e-6, 10 * m.jitter_used * np.linalg.norm(y))
    np.testing.assert_allclose(mu, y, atol=tol)
    assert np.all(var <= 1e-6)


def test_far_query_recovers_prior():
    m = gp.fit([[0.0], [0.1]], [4.0, 5.0], _se(2.0, (0.3,)))
    mu, var = m.predict([100.0])
    assert mu == pytest.approx(0.0, abs=1e-12)
    assert var == pytest.approx(4.0, rel=1e-12)


@pytest.mark.parametrize("kind", ["se", "matern52"])
def test_five_points_match_explicit_inverse(rng, kind):
    X = rng.uniform(-1, 1, size=(5, 2))
    y = rng.normal(size=5)
    ls = (0.7, 1.2)
    if kind == "se":
        spec, k = _se(1.4, ls), (lambda a, b: se_kernel(a, b, 1.4, ls))
    else:
        spec, k = _m52(1.4, ls), (lambda a, b: matern52_kernel(a, b, 1.4, ls))
    Xs = rng.uniform(-1.5, 1.5, size=(20, 2))
    mu_ref, var_ref = gp_explicit(X, y, k, Xs)
    mu, var = gp.fit(X, y, spec).predict_batch(Xs)
    np.testing.assert_allclose(mu, mu_ref, atol=1e-9)
    np.testing.assert_allclose(var, np.maximum(var_ref, 0), atol=1e-9)


def test_posterior_variance_bounds(rng):
    X = rng.uniform(-1, 1, size=(25, 2))
    y = rng.normal(size=25)
    for spec in (_se(1.2, (0.4,), 1e-10), _m52(0.8, (0.3, 0.6), 1e-10)):
        _, var = gp.fit(X, y, spec).predict_batch(rng.uniform(-2, 2, size=(10_000, 2)))
        assert np.all(var >= 0)
        assert np.all(var <= spec.variance + 1e-9)


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31), st.sampled_from(["se", "matern52"]))
def test_adding_data_never_increases_variance(seed, kind):
    r = np.random.default_rng(seed)
    X = r.uniform(-1, 1, size=(8, 2))
    y = r.normal(size=8)
    spec = gp.KernelSpec(kind, 1.0, (0.5, 0.7), 1e-10)
    Q = r.uniform(-1.5, 1.5, size=(30, 2))
    _, v_small = gp.fit(X[:7], y[:7], spec).predict_batch(Q)
    _, v_big = gp.fit(X, y, spec).predict_batch(Q)
    assert np.all(v_big <= v_small + 1e-8)


# ---------------------------------------------------------------- likelihood

def test_lml_single_point():
    m = gp.fit([[0.0]], [0.0], _se())
    assert m.log_marginal_likelihood() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert m.log_marginal_likelihood() == pytest.approx(-0.918939, abs=1e-6)


def test_lml_zero_targets_drop_quadratic_term(rng):
    X = rng.uniform(-1, 1, size=(4, 1))
    m = gp.fit(X, np.zeros(4), _se(1.0, (0.5,)))
    assert m.log_marginal_likelihood() == pytest.approx(
        -np.sum(np.log(np.diag(m.chol))) - 2 * math.log(2 * math.pi), rel=1e-14)


def test_lml_three_points_match_explicit_determinant(rng):
    X = rng.uniform(-1, 1, size=(3, 2))
    y = rng.normal(size=3)
    ref = lml_explicit(X, y, lambda a, b: matern52_kernel(a, b, 0.9, [0.4, 0.8]))
    assert gp.fit(X, y, _m52(0.9, (0.4, 0.8))).log_marginal_likelihood() == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("kind, ard, square", [("se", False, False), ("matern52", True, False),
                                               ("matern52", True, True), ("se", True, False)])
def test_likelihood_gradient(rng, kind, ard, square):
    X = rng.uniform(-1, 1, size=(10, 2))
    y = np.sin(3 * X[:, 0]) + X[:, 1]
    theta = np.array([0.2, -0.5, 0.1]) if ard else np.array([0.2, -0.5])
    f = lambda t: gp._nll_and_grad(t, X, y, kind, ard, 1e-10, square)[0]  # noqa: E731
    g = lambda t: gp._nll_and_grad(t, X, y, kind, ard, 1e-10, square)[1]  # noqa: E731
    assert check_grad(f, g, theta) <= 1e-5 * max(1.0, np.linalg.norm(g(theta)))


def test_model_json_round_trip(rng):
    X = rng.uniform(-1, 1, size=(6, 2))
    y = rng.normal(size=6)
    m = gp.fit(X, y, _m52(0.7, (0.3, 0.5), 1e-10))
    back = gp.GpModel.from_dict(json.loads(json.dumps(m.to_dict())))
    Q = rng.uniform(-1, 1, size=(5, 2))
    np.testing.assert_array_equal(back.predict_batch(Q)[0], m.predict_batch(Q)[0])


# ---------------------------------------------------------------- hyperparameters

def test_recovers_known_lengthscale():
    r = np.random.default_rng(2024)
    X = np.sort(r.uniform(0.0, 10.0, size=(200, 1)), axis=0)
    K = gp.kernel_matrix(_se(1.0, (0.5,)), X) + 1e-8 * np.eye(200)
    y = np.linalg.cholesky(K) @ r.standard_normal(200)
    spec, info = gp.optimize_hyperparameters(X, y, "se", n_starts=5, rng=np.random.default_rng(1))
    assert 0.3 <= spec.lengthscales[0] <= 0.8
    assert not info["warning"]


def test_constant_targets_shrink_output_scale():
    X = np.linspace(0, 1, 6).reshape(-1, 1)
    spec, _ = gp.optimize_hyperparameters(X, np.zeros(6), "se", n_starts=3, rng=np.random.default_rng(0))
    assert spec.sigma0 == pytest.approx(gp.SIGMA0_BOUNDS[0], rel=1e-6)


def test_more_restarts_never_worse(rng):
    X = rng.uniform(-1, 1, size=(15, 2))
    y = np.sin(4 * X[:, 0]) * np.cos(3 * X[:, 1])
    _, one = gp.optimize_hyperparameters(X, y, "matern52", n_starts=1, rng=np.random.default_rng(3))
    _, five = gp.optimize_hyperparameters(X, y, "matern52", n_starts=5, rng=np.random.default_rng(3))
    assert five["log_likelihood"] >= one["log_likelihood"] - 1e-9


def test_optimizer_respects_bounds(rng):
    X = rng.uniform(-1, 1, size=(10, 3))
    spec, _ = gp.optimize_hyperparameters(X, 1e6 * rng.normal(size=10), "matern52", rng=rng)
    assert gp.SIGMA0_BOUNDS[0] <= spec.sigma0 <= gp.SIGMA0_BOUNDS[1]
    assert all(gp.SIGMA1_BOUNDS[0] <= v <= gp.SIGMA1_BOUNDS[1] for v in spec.lengthscales)
    assert len(spec.lengthscales) == 3


def test_optimizer_needs_two_points():
    with pytest.raises(InvalidInputError):
        gp.optimize_hyperparameters([[0.0]], [1.0], "se")
