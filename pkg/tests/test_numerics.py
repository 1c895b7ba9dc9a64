import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddmpc.errors import Infeasible, InvalidMatrix
from ddmpc.numerics import (
    NlpProblem,
    QpProblem,
    fd_gradient,
    kkt_residuals,
    numerical_rank,
    pinv,
    solve_nlp,
    solve_nlsq,
    solve_qp,
    svd,
)
from ddmpc.plants import impulse_response
from ddmpc.realization import markov_hankel


def enumerate_qp(H, q, F, g):
    """Brute-force oracle: solve the KKT system of every active set, keep the best feasible point."""
    n = H.shape[0]
    best = None
    for r in range(min(n, F.shape[0]) + 1):
        for act in itertools.combinations(range(F.shape[0]), r):
            A = F[list(act)]
            K = np.block([[2 * H, A.T], [A, np.zeros((r, r))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-q, g[list(act)]]))
            except np.linalg.LinAlgError:
                continue
            z = sol[:n]
            if np.all(F @ z <= g + 1e-9):
                f = z @ H @ z + q @ z
                if best is None or f < best[1] - 1e-12:
                    best = (z, f)
    return best


def random_feasible_qp(rng, n, k, neq=0):
    L = rng.standard_normal((n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    z_feas = rng.standard_normal(n)
    F = rng.standard_normal((k, n))
    g = F @ z_feas + rng.uniform(0.0, 1.0, k)
    Feq = rng.standard_normal((neq, n)) if neq else None
    geq = Feq @ z_feas if neq else None
    return QpProblem(H, q, F, g, Feq, geq)


@pytest.mark.parametrize("M, S", [(np.eye(3), [1, 1, 1]), (np.diag([5.0, 2.0, 0.0]), [5, 2, 0])])
def test_svd_simple(M, S):
    np.testing.assert_allclose(svd(M).S, S, atol=1e-14)


def test_svd_hankel_of_third_order_impulse(lti3):
    Hk = markov_hankel(impulse_response(lti3, 50), 5, 5)
    S = svd(Hk).S
    assert int(np.sum(S > 1e-6)) == 3


def test_svd_rejects_nonfinite():
    with pytest.raises(InvalidMatrix):
        svd(np.array([[1.0, np.nan]]))


def test_pinv_cases(rng):
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    np.testing.assert_allclose(pinv(A), np.linalg.inv(A), atol=1e-12)
    np.testing.assert_array_equal(pinv(np.zeros((2, 3))), np.zeros((3, 2)))
    M = rng.standard_normal((4, 8))
    np.testing.assert_allclose(M @ pinv(M), np.eye(4), atol=1e-8)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_pinv_penrose(m, n, seed):
    M = np.random.default_rng(seed).standard_normal((m, n))
    P = pinv(M)
    np.testing.assert_allclose(M @ P @ M, M, atol=1e-9)
    np.testing.assert_allclose(P @ M @ P, P, atol=1e-9)
    assert numerical_rank(M) == min(m, n)


def test_qp_trivial():
    assert solve_qp(QpProblem([[1.0]], [-2.0])).z[0] == pytest.approx(1.0)
    assert solve_qp(QpProblem([[1.0]], [0.0], [[-1.0]], [-1.0])).z[0] == pytest.approx(1.0)


def test_qp_infeasible():
    with pytest.raises(Infeasible):
        solve_qp(QpProblem(np.eye(1), [0.0], [[1.0], [-1.0]], [-1.0, -1.0]))


def test_qp_box_matches_enumeration(rng):
    for _ in range(5):
        n = 5
        L = rng.standard_normal((n, n))
        H = L @ L.T + 0.1 * np.eye(n)
        q = 3 * rng.standard_normal(n)
        F = np.zeros((3, n))
        F[[0, 1, 2], [0, 2, 4]] = 1.0
        g = np.full(3, 0.1)
        z, _ = enumerate_qp(H, q, F, g)
        np.testing.assert_allclose(solve_qp(QpProblem(H, q, F, g)).z, z, atol=1e-6)


@pytest.mark.parametrize("neq", [0, 1, 2])
def test_qp_kkt_random(rng, neq):
    for _ in range(10):
        p = random_feasible_qp(rng, 6, 8, neq)
        res = solve_qp(p)
        assert max(kkt_residuals(p, res.z, res.lam, res.nu).values()) <= 1e-8


def test_qp_warm_start_same_answer(rng):
    p = random_feasible_qp(rng, 5, 6)
    a = solve_qp(p)
    b = solve_qp(p, z0=a.z + 0.01)
    np.testing.assert_allclose(a.z, b.z, atol=1e-9)


def test_qp_rejects_asymmetric():
    with pytest.raises(InvalidMatrix):
        QpProblem([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])


@pytest.mark.parametrize(
    "prob, z_star, tol",
    [
        (NlpProblem(cost=lambda z: float((z[0] - 2) ** 2), z0=[0.0]), [2.0], 1e-6),
        (NlpProblem(cost=lambda z: float(z @ z), z0=[0.0, 0.0], eq=lambda z: np.array([z[0] + z[1] - 1])),
         [0.5, 0.5], 1e-6),
        (NlpProblem(cost=lambda z: float(100 * (z[1] - z[0] ** 2) ** 2 + (1 - z[0]) ** 2), z0=[-1.2, 1.0]),
         [1.0, 1.0], 1e-4),
    ],
)
def test_nlp_examples(prob, z_star, tol):
    res = solve_nlp(prob, tol=1e-10)
    np.testing.assert_allclose(res.z, z_star, atol=tol)


def test_nlp_bounds_and_inequality():
    prob = NlpProblem(cost=lambda z: float((z[0] - 3) ** 2 + (z[1] + 1) ** 2), z0=[0.0, 0.0],
                      ineq=lambda z: np.array([z[0] + z[1] - 1.0]), lb=[-np.inf, 0.0])
    res = solve_nlp(prob, tol=1e-10)
    np.testing.assert_allclose(res.z, [1.0, 0.0], atol=1e-5)


def test_nlsq_bounded():
    res = solve_nlsq(lambda z: z - 2.0, lambda z: np.eye(2), [0.0, 0.0], ub=[1.0, 5.0])
    np.testing.assert_allclose(res.z, [1.0, 2.0], atol=1e-9)
    assert res.kkt <= 1e-9


def test_fd_gradient():
    np.testing.assert_allclose(fd_gradient(lambda z: float(z @ z), np.array([1.0, 2.0])), [2, 4], atol=1e-6)
    np.testing.assert_allclose(fd_gradient(lambda z: 3.0, np.zeros(3)), np.zeros(3))
