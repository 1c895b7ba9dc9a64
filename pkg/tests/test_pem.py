import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddmpc.errors import DimensionMismatch, SingularSteadyState
from ddmpc.numerics import fd_gradient
from ddmpc.pem import (
    PemParams,
    init_params,
    pem_identify,
    pem_loss,
    pem_loss_grad,
    pem_rollout,
    pem_steady_state,
)
from ddmpc.plants import LinearModel, PrmsConfig, lti_simulate, lti_step, prms, prms_levels

from conftest import random_stable


def _params(model: LinearModel, x0) -> PemParams:
    return PemParams(np.array(model.A, float), np.array(model.B, float), np.array(model.C, float), np.asarray(x0, float))


def test_memoryless_rollout(rng):
    p = PemParams(np.zeros((2, 2)), rng.standard_normal((2, 1)), rng.standard_normal((1, 2)), np.zeros(2))
    U = rng.standard_normal((1, 30))
    np.testing.assert_allclose(pem_rollout(p, U), p.C @ p.B @ U, atol=1e-14)


def test_exact_fit_has_zero_loss(pem4, rng):
    x0 = rng.standard_normal(4)
    U = rng.standard_normal((1, 80))
    _, Y = lti_simulate(pem4, x0, U)
    p = _params(pem4, x0)
    np.testing.assert_allclose(pem_rollout(p, U), Y, atol=1e-13)
    assert pem_loss(p, U, Y) == pytest.approx(0.0, abs=1e-24)


@settings(max_examples=20)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
def test_rollout_matches_step_oracle(seed, n):
    rng = np.random.default_rng(seed)
    sysm = random_stable(rng, n)
    x0 = rng.standard_normal(n)
    U = rng.standard_normal((1, 40))
    Yh = pem_rollout(_params(sysm, x0), U)
    x = x0.copy()
    for k in range(40):
        x, _ = lti_step(sysm, x, U[:, k])
        assert abs(Yh[0, k] - (sysm.C @ x)[0]) <= 1e-12


def test_zero_prediction_loss(rng):
    Y = rng.standard_normal((1, 25))
    p = PemParams(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2)), np.zeros(2))
    assert pem_loss(p, rng.standard_normal((1, 25)), Y) == pytest.approx(np.sum(Y**2), rel=1e-14)


def test_loss_matches_direct_sum(rng):
    p = init_params(3, 1, 1, rng, scale=0.4)
    U, Y = rng.standard_normal((1, 50)), rng.standard_normal((1, 50))
    Yh = pem_rollout(p, U)
    direct = sum((Y[0, k] - Yh[0, k]) ** 2 for k in range(50))
    assert pem_loss(p, U, Y) == pytest.approx(direct, abs=1e-10)


def test_divergent_rollout_is_guarded():
    p = PemParams(np.array([[3.0]]), np.array([[1.0]]), np.array([[1.0]]), np.array([1.0]))
    U, Y = np.ones((1, 200)), np.zeros((1, 200))
    loss = pem_loss(p, U, Y)
    assert np.isfinite(loss) and loss >= 1e10
    assert np.all(pem_loss_grad(p.pack(), U, Y, 1)[1] == 0)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        pem_rollout(PemParams(np.eye(2), np.zeros((2, 1)), np.zeros((1, 2)), np.zeros(2)), np.zeros((2, 5)))


@pytest.mark.parametrize("l", [1, 2, 4])
def test_gradient_matches_central_differences(l):
    rng = np.random.default_rng(10 + l)
    U, Y = rng.standard_normal((1, 30)), rng.standard_normal((1, 30))
    for _ in range(10):
        th = init_params(l, 1, 1, rng, scale=0.4).pack()
        th[-l:] = rng.standard_normal(l)
        _, g = pem_loss_grad(th, U, Y, l)
        gf = fd_gradient(lambda t: pem_loss_grad(t, U, Y, l)[0], th)
        assert np.linalg.norm(g - gf) <= 1e-5 * max(1.0, np.linalg.norm(gf))


def _prms_data(model, length=400, seed=3):
    U = prms(PrmsConfig(levels=prms_levels(-1, 1, 5), dwell=3, seed=seed), length)
    return U, lti_simulate(model, np.zeros(model.n), U)[1]


def test_first_order_identification():
    plant = LinearModel([[0.8]], [[0.5]], [[1.0]])
    U, Y = _prms_data(plant)
    fit = pem_identify(U, Y, 1, seed=0, restarts=2)
    assert fit.train_loss <= fit.init_loss
    Yh = pem_rollout(fit.params, U)
    scale = np.ptp(Y)
    assert fit.validation_rmse <= 1e-4 * scale
    assert np.max(np.abs(Yh[:, 200:] - Y[:, 200:])) <= 1e-4 * scale


def test_zero_output_data():
    U = prms(PrmsConfig(levels=(-1.0, 1.0), dwell=2, seed=0), 100)
    fit = pem_identify(U, np.zeros((1, 100)), 2, seed=0, restarts=1, max_inner=500)
    assert fit.train_loss <= 1e-12
    assert np.max(np.abs(pem_rollout(fit.params, U))) <= 1e-6


def test_zero_budget_returns_initialization():
    U, Y = _prms_data(LinearModel([[0.5]], [[1.0]], [[1.0]]), length=50)
    fit = pem_identify(U, Y, 1, seed=4, restarts=1, max_inner=0)
    assert fit.status == "not_run"
    assert fit.train_loss == pytest.approx(fit.init_loss)


def test_fourth_order_validation(pem4):
    U = prms(PrmsConfig(seed=1), 1000)
    _, Y = lti_simulate(pem4, np.zeros(4), U)
    fit = pem_identify(U, Y, 4, seed=0, restarts=3)
    assert fit.validation_rmse <= 0.02 * np.ptp(Y)


def test_scalar_steady_state():
    ss = pem_steady_state(PemParams(np.array([[0.5]]), np.array([[1.0]]), np.array([[1.0]]), np.zeros(1)), [1.0])
    assert ss.x_r[0] == pytest.approx(1.0, abs=1e-12)
    assert ss.u_r[0] == pytest.approx(0.5, abs=1e-12)


def test_zero_reference_steady_state(rng):
    sysm = random_stable(rng, 3)
    ss = pem_steady_state(_params(sysm, np.zeros(3)), [0.0])
    assert np.allclose(ss.x_r, 0) and np.allclose(ss.u_r, 0)


def test_steady_state_dense_oracle(pem4):
    ss = pem_steady_state(_params(pem4, np.zeros(4)), [1.0])
    K = np.block([[np.eye(4) - pem4.A, -pem4.B], [pem4.C, np.zeros((1, 1))]])
    ref = np.linalg.solve(K, np.r_[np.zeros(4), 1.0])
    np.testing.assert_allclose(np.r_[ss.x_r, ss.u_r], ref, atol=1e-12)
    x1, y1 = lti_step(pem4, ss.x_r, ss.u_r)
    assert np.max(np.abs(x1 - ss.x_r)) <= 1e-8 and abs(y1[0] - 1.0) <= 1e-8


def test_inconsistent_steady_state():
    # C = 0, so no steady state reaches y_r = 1
    p = PemParams(np.eye(1), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))
    with pytest.raises(SingularSteadyState):
        pem_steady_state(p, [1.0])
