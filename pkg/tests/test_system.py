"""Plant and observer recursions, rewards and the Van der Pol benchmark."""

import io
import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safeobs import lmi
from safeobs.basis import identity_basis, tanh_basis
from safeobs.errors import DivergenceError, InvalidInputError
from safeobs.numerics import matrix_rank, observability_matrix
from safeobs.system import (
    BasisExpansion,
    ObserverConfig,
    SystemModel,
    compute_reward,
    run_observer,
    simulate,
    simulate_plant,
    van_der_pol_model,
)

# Reference simulation with a plain Python loop (x0 = [1, 1], u = 0, 4000 samples).
VDP_SUP_NORM_4000 = 8.816494938203537
VDP_FINAL_STATE_4000 = (8.815783394478016, 0.11200953983607315)


def _zero_phi(q):
    return np.zeros(2)


def _linear_sys(A, phi=_zero_phi, B=None):
    B = np.array([[1.0], [0.5]]) if B is None else B
    return SystemModel(A, B, [[1.0, 0.0]], np.eye(2), true_phi=phi, check_observable=False)


def test_vdp_matrices():
    sys, exp = van_der_pol_model(0.01)
    np.testing.assert_array_equal(sys.A, [[1.0, 0.01], [0.01, 0.99]])
    np.testing.assert_array_equal(sys.B, [[0.0], [-0.01]])
    np.testing.assert_array_equal(sys.C, [[1.0, 0.0]])
    np.testing.assert_array_equal(sys.Cq, np.eye(2))
    assert matrix_rank(observability_matrix(sys.A, sys.C)) == 2
    assert exp.rows == [1] and exp.basis.n_p == 5
    np.testing.assert_allclose(sys.true_phi(np.array([2.0, 3.0])), [0.0, -0.01 * 12.0])


@pytest.mark.parametrize("tau", [0.0, -0.01, 0.2])
def test_vdp_rejects_bad_tau(tau):
    with pytest.raises(InvalidInputError):
        van_der_pol_model(tau)


def test_vdp_reference_trajectory_is_bounded():
    sys, _ = van_der_pol_model()
    x, y = simulate_plant(sys, [1.0, 1.0], None, 4000)
    assert np.all(np.isfinite(x))
    assert np.linalg.norm(x, axis=1).max() == pytest.approx(VDP_SUP_NORM_4000, rel=1e-12)
    np.testing.assert_allclose(x[-1], VDP_FINAL_STATE_4000, rtol=1e-12)
    np.testing.assert_array_equal(y[:, 0], x[:, 0])


def test_zero_dynamics_reproduce_input():
    sys = _linear_sys(np.zeros((2, 2)))
    u = np.arange(1.0, 7.0).reshape(6, 1)
    x, _ = simulate_plant(sys, [3.0, -4.0], u, 6)
    for t in range(1, 6):
        np.testing.assert_array_equal(x[t], sys.B @ u[t - 1])


def test_stable_linear_plant_decays_geometrically():
    A = np.array([[0.5, 0.1], [0.0, 0.4]])
    x, _ = simulate_plant(_linear_sys(A), [1.0, 1.0], None, 60)
    norms = np.linalg.norm(x, axis=1)
    assert norms[-1] < 1e-15
    assert np.all(norms[20:] <= norms[19] * 0.6 ** np.arange(1, 41) * 10)


def test_plant_divergence_guard():
    sys = _linear_sys(2.0 * np.eye(2))
    with pytest.raises(DivergenceError) as info:
        simulate_plant(sys, [1.0, 1.0], None, 100, guard=1e3)
    assert info.value.which == "plant"
    assert info.value.step == 10


def test_plant_needs_true_phi_and_positive_horizon():
    sys = SystemModel(np.eye(2) * 0.5, np.zeros((2, 1)), [[1.0, 0.0]], np.eye(2), check_observable=False)
    with pytest.raises(InvalidInputError):
        simulate_plant(sys, [0.0, 0.0], None, 5)
    with pytest.raises(InvalidInputError):
        simulate_plant(_linear_sys(np.eye(2) * 0.5), [0.0, 0.0], None, 0)


def test_system_dimension_checks():
    with pytest.raises(InvalidInputError):
        SystemModel(np.eye(2), np.zeros((3, 1)), [[1.0, 0.0]], np.eye(2))
    with pytest.raises(InvalidInputError):
        SystemModel(np.eye(2), np.zeros((2, 1)), [[1.0, 0.0]], np.eye(2))  # unobservable


def test_perfect_model_and_initialization_give_zero_error():
    sys, exp = van_der_pol_model()
    p_star = np.zeros(5)
    sys0 = SystemModel(sys.A, sys.B, sys.C, sys.Cq,
                       true_phi=exp.with_coefficients(p_star), tau=sys.tau)
    L = np.array([[-1.0], [-0.4]])
    obs = ObserverConfig(L, exp.with_coefficients(p_star), np.array([0.3, -0.2]))
    tr = simulate(sys0, obs, [0.3, -0.2], 200)
    assert np.all(tr.errnorm == 0.0)


def test_open_loop_estimator_without_gain():
    A = np.array([[0.8, 0.1], [0.0, 0.7]])
    sys = _linear_sys(A)
    exp = BasisExpansion(identity_basis(2), [0], 2, [0.0, 0.0])
    xh = run_observer(sys, ObserverConfig(np.zeros((2, 1)), exp, np.array([1.0, 2.0])), np.ones((5, 1)))
    ref = [np.array([1.0, 2.0])]
    for _ in range(4):
        ref.append(A @ ref[-1])
    np.testing.assert_allclose(xh, ref, rtol=1e-15)


def test_error_norm_matches_difference(rng):
    sys, exp = van_der_pol_model()
    obs = ObserverConfig(np.array([[-1.0], [-0.4]]), exp, np.array([0.0, 0.0]))
    tr = simulate(sys, obs, [1.0, 1.0], 300)
    np.testing.assert_allclose(tr.errnorm, np.linalg.norm(tr.xhat - tr.x, axis=1), atol=1e-12)


def test_simulation_is_bit_deterministic():
    sys, exp = van_der_pol_model()
    obs = ObserverConfig(np.array([[-1.0], [-0.4]]), exp, np.array([0.0, 0.0]))
    a = simulate(sys, obs, [1.0, 1.0], 500)
    b = simulate(sys, obs, [1.0, 1.0], 500)
    assert a.to_csv() == b.to_csv()


@given(st.lists(st.floats(-0.02, 0.02), min_size=2, max_size=2),
       st.lists(st.floats(-0.01, 0.01), min_size=2, max_size=2),
       st.lists(st.floats(-1.0, 1.0), min_size=2, max_size=2))
def test_error_recursion_consistency(p_star, e_p, xhat0):
    A = np.array([[0.95, 0.1], [-0.05, 0.9]])
    C = np.array([[1.0, 0.0]])
    L = np.array([[-0.5], [-0.2]])
    truth = BasisExpansion(tanh_basis(2), [1], 2, p_star, pbar=1.0)
    est = truth.with_coefficients(np.add(p_star, e_p))
    sys = SystemModel(A, np.zeros((2, 1)), C, np.eye(2), true_phi=truth)
    tr = simulate(sys, ObserverConfig(L, est, np.array(xhat0)), [0.5, -0.5], 100)
    e = tr.xhat - tr.x
    rec = e[0].copy()
    for t in range(99):
        psi_hat = truth.basis(tr.xhat[t])
        psi = truth.basis(tr.x[t])
        rec = (A + L @ C) @ rec
        rec[1] += np.dot(np.add(p_star, e_p), psi_hat) - np.dot(p_star, psi)
        np.testing.assert_allclose(rec, e[t + 1], atol=1e-9)


def test_liss_decrease_spot_check():
    A = np.array([[0.9, 0.2], [-0.1, 0.8]])
    C = np.array([[1.0, 0.0]])
    base = SystemModel(A, np.zeros((2, 1)), C, np.eye(2))
    lip_max, _ = lmi.line_search_lipschitz(base, 1.0, 0.0, 1.0)
    pbar = 0.9 * lip_max
    p_star = np.array([0.6, -0.4]) / np.linalg.norm([0.6, -0.4]) * 0.99 * pbar
    truth = BasisExpansion(tanh_basis(2), [1], 2, p_star, pbar=pbar)
    # tanh basis: Lipschitz constant 1, norm bounded by sqrt(2).
    sys = SystemModel(A, np.zeros((2, 1)), C, np.eye(2), true_phi=truth, phi_bound=np.sqrt(2))
    sol = lmi.design_initial(sys, pbar, 1.0)
    rep = lmi.verify_certificate(sol, sys, 1.0, pbar)
    assert rep.passed
    P, Q, L = sol.P, sol.Q, sol.L
    e_p = np.array([0.002, 0.001])
    obs = ObserverConfig(L, truth.with_coefficients(p_star + e_p, enforce_bound=False), np.array([2.0, -1.0]))
    tr = simulate(sys, obs, [0.5, 0.5], 300)
    e = tr.xhat - tr.x
    regime = np.linalg.eigvalsh(Q).min() / (8 * sys.phi_bound * pbar * np.linalg.norm(P @ (A + L @ C)))
    checked = 0
    for t in range(299):
        if np.linalg.norm(e_p) > regime * np.linalg.norm(e[t]):
            continue
        dV = e[t + 1] @ P @ e[t + 1] - e[t] @ P @ e[t]
        assert dV <= -rep.delta0 * (e[t] @ e[t]) + rep.delta1 * (e_p @ e_p) + 1e-8
        checked += 1
    assert checked >= 10


def test_reward_zero_for_perfect_fit():
    y = np.arange(10.0).reshape(-1, 1)
    assert compute_reward(y, y, [0.1, 0.2], [0.1, 0.2], 200.0, 1.0) == 0.0


def test_reward_single_step_arithmetic():
    assert compute_reward([[0.0]], [[3.0]], [5.0], [0.0], 2.0, 0.0) == -18.0


def test_reward_penalty_scaled_by_horizon():
    y = np.zeros((4, 1))
    assert compute_reward(y, y, [3.0, 4.0], [0.0, 0.0], 1.0, 2.0, T_ell=4) == pytest.approx(-12.5)


def test_reward_truncation_drops_transient():
    y = np.zeros((5, 1))
    yh = np.array([[10.0], [0.0], [1.0], [0.0], [0.0]])
    assert compute_reward(y, yh, [0.0], [0.0], 1.0, 1.0, t_star=0) == -101.0
    assert compute_reward(y, yh, [0.0], [0.0], 1.0, 1.0, t_star=1) == -1.0


def test_reward_vdp_weights_decrease_with_residual():
    y = np.zeros((100, 1))
    vals = [compute_reward(y, y + s, np.zeros(5), 1e-2, 200.0, 1.0) for s in (0.0, 0.01, 0.1, 1.0)]
    assert all(np.isfinite(vals)) and all(v < 0 for v in vals)
    assert vals == sorted(vals, reverse=True)


@pytest.mark.parametrize("kwargs", [
    {"W1": 0.0}, {"W2": -1.0}, {"T_ell": 11}, {"t_star": 10}, {"W1": np.eye(2)},
])
def test_reward_input_validation(kwargs):
    base = dict(y_seq=np.zeros((10, 1)), yhat_seq=np.zeros((10, 1)), p=[0.0], anchor=[0.0], W1=1.0, W2=1.0)
    base.update(kwargs)
    with pytest.raises(InvalidInputError):
        compute_reward(**base)


def test_reward_shape_mismatch():
    with pytest.raises(InvalidInputError):
        compute_reward(np.zeros((10, 1)), np.zeros((9, 1)), [0.0], [0.0], 1.0, 1.0)


def test_trajectory_csv_layout():
    sys, exp = van_der_pol_model()
    tr = simulate(sys, ObserverConfig(np.array([[-1.0], [-0.4]]), exp, np.zeros(2)), [1.0, 1.0], 5)
    rows = list(csv.reader(io.StringIO(tr.to_csv())))
    assert rows[0] == ["t", "x1", "x2", "xhat1", "xhat2", "y1", "errnorm"]
    assert len(rows) == 6
    assert float(rows[2][0]) == pytest.approx(0.01)
    assert float(rows[3][1]) == tr.x[2, 0]
