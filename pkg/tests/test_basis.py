"""Basis evaluation, analytic Jacobians and expansions."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference_jacobian, legendre_terms
from safeobs.basis import Basis, identity_basis, monomial, preset, tanh_basis, vdp_legendre_basis
from safeobs.errors import InvalidInputError, UnsupportedError
from safeobs.system import BasisExpansion

coords = st.floats(-2.0, 2.0, allow_nan=False)


def test_legendre_at_origin():
    np.testing.assert_allclose(vdp_legendre_basis()([0.0, 0.0]), [10.0, 0, 0, 0, 0], atol=0)


def test_legendre_at_ones_matches_direct_evaluation():
    np.testing.assert_allclose(vdp_legendre_basis()([1.0, 1.0]), legendre_terms(1.0, 1.0), rtol=1e-14)


@given(coords, coords)
def test_legendre_matches_direct_evaluation(a, b):
    np.testing.assert_allclose(vdp_legendre_basis()([a, b]), legendre_terms(a, b), rtol=1e-12, atol=1e-11)


def test_identity_basis_value_and_gradient():
    b = identity_basis(2)
    np.testing.assert_array_equal(b([2.0, 3.0]), [2.0, 3.0])
    np.testing.assert_array_equal(b.jacobian([2.0, 3.0]), np.eye(2))


def test_single_monomial_gradient():
    b = Basis([monomial([2, 1])], 2)
    np.testing.assert_allclose(b.jacobian([1.0, 2.0]), [[4.0, 1.0]])


@given(coords, coords)
def test_legendre_gradient_matches_finite_differences(a, b):
    basis = vdp_legendre_basis()
    q = np.array([a, b])
    fd = central_difference_jacobian(basis, q)
    an = basis.jacobian(q)
    assert np.allclose(an, fd, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(an).max()))


@given(coords, coords)
def test_tanh_gradient_matches_finite_differences(a, b):
    basis = tanh_basis(2)
    q = np.array([a, b])
    np.testing.assert_allclose(basis.jacobian(q), central_difference_jacobian(basis, q), atol=1e-8)


def test_batch_agrees_with_pointwise(rng):
    basis = vdp_legendre_basis()
    q = rng.uniform(-1, 1, size=(20, 2))
    np.testing.assert_allclose(basis.eval_batch(q), np.array([basis(p) for p in q]), rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(basis.jacobian_batch(q), np.array([basis.jacobian(p) for p in q]), rtol=1e-13, atol=1e-13)


def test_non_differentiable_basis_raises():
    b = Basis([{"type": "function", "name": "abs", "index": 0}], 1)
    assert b([-2.0])[0] == 2.0
    with pytest.raises(UnsupportedError):
        b.jacobian([1.0])


@pytest.mark.parametrize("terms, nq", [
    ([], 2),
    ([monomial([1])], 2),
    ([monomial([-1, 0])], 2),
    ([{"type": "function", "name": "exp", "index": 0}], 1),
    ([{"type": "function", "name": "sin", "index": 3}], 2),
    ([{"type": "spline"}], 1),
])
def test_malformed_basis_rejected(terms, nq):
    with pytest.raises(InvalidInputError):
        Basis(terms, nq)


def test_non_finite_input_rejected():
    with pytest.raises(InvalidInputError):
        vdp_legendre_basis()([np.nan, 0.0])


def test_basis_dict_round_trip():
    b = vdp_legendre_basis()
    back = Basis.from_dict(json.loads(json.dumps(b.to_dict())))
    np.testing.assert_array_equal(back([0.3, -0.7]), b([0.3, -0.7]))
    assert preset("tanh", n_q=3).n_p == 3
    with pytest.raises(InvalidInputError):
        preset("wavelet")


def test_expansion_places_output_on_selected_rows():
    exp = BasisExpansion(identity_basis(2), [1], 3, [0.5, -0.25], pbar=1.0)
    np.testing.assert_allclose(exp([2.0, 4.0]), [0.0, 0.0, 0.0])
    np.testing.assert_allclose(exp([2.0, 8.0]), [0.0, -1.0, 0.0])
    np.testing.assert_array_equal(exp.B_phi, [[0.0], [1.0], [0.0]])


def test_expansion_enforces_coefficient_bound():
    with pytest.raises(InvalidInputError):
        BasisExpansion(identity_basis(2), [0], 2, [1.0, 1.0], pbar=1.0)
    exp = BasisExpansion(identity_basis(2), [0], 2, [1.0, 1.0], pbar=1.0, enforce_bound=False)
    assert np.linalg.norm(exp.p) > exp.pbar


def test_expansion_batch_and_jacobian(rng):
    exp = BasisExpansion(vdp_legendre_basis(), [1], 2, [1e-3, -2e-3, 0, 4e-3, 1e-3], pbar=1e-2)
    q = rng.uniform(-1, 1, size=(7, 2))
    np.testing.assert_allclose(exp.eval_batch(q), np.array([exp(p) for p in q]), rtol=1e-14)
    for k in range(q.shape[0]):
        fd = central_difference_jacobian(lambda z: exp(z)[1:], q[k])
        np.testing.assert_allclose(exp.jacobian_batch(q)[k], fd, atol=1e-8)
