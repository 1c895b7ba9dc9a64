import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddmpc.errors import DegenerateHankel, InsufficientData
from ddmpc.plants import LinearModel, impulse_response
from ddmpc.realization import RealizationConfig, ho_kalman_kung, markov_hankel, markov_reconstruction_error

from conftest import random_stable


def test_third_order_realization(lti3):
    g = impulse_response(lti3, 50)
    real = ho_kalman_kung(g, RealizationConfig(N=5, H=5, epsilon=1e-6))
    assert real.s == 3
    gh = impulse_response(real.model, 9)
    assert gh[0, 0, 0] == pytest.approx(0.1, abs=1e-8)
    assert gh[1, 0, 0] == pytest.approx(-0.01, abs=1e-8)
    assert markov_reconstruction_error(real, g[:9]) <= 1e-8
    np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(real.model.A)),
                               np.sort_complex(np.linalg.eigvals(lti3.A)), atol=1e-8)


def test_scalar_realization():
    g = impulse_response(LinearModel([[0.5]], [[1.0]], [[1.0]]), 12)
    real = ho_kalman_kung(g, RealizationConfig(N=3, H=4))
    assert real.s == 1
    assert real.model.A[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_zero_impulse_is_degenerate():
    with pytest.raises(DegenerateHankel):
        ho_kalman_kung(np.zeros(20))


def test_short_impulse_rejected():
    with pytest.raises(InsufficientData):
        ho_kalman_kung(np.ones(5), RealizationConfig(N=3, H=4))


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_realization_is_similarity_invariant(seed, n):
    rng = np.random.default_rng(seed)
    model = random_stable(rng, n, rho=0.8)
    g = impulse_response(model, 20)
    P = np.eye(n) + 0.3 * rng.standard_normal((n, n))
    if abs(np.linalg.det(P)) < 0.1:
        P = np.eye(n)
    a = ho_kalman_kung(g, RealizationConfig(N=n + 2, H=n + 3, epsilon=1e-9))
    b = ho_kalman_kung(g, RealizationConfig(N=n + 2, H=n + 3, epsilon=1e-9), P=P[:a.s, :a.s] if a.s == n else None)
    np.testing.assert_allclose(impulse_response(a.model, 10), impulse_response(b.model, 10), atol=1e-8)
    assert markov_reconstruction_error(a, g[:2 * n + 4]) <= 1e-6


def test_truncated_realization_error_tracks_svd_tail(rng):
    model = random_stable(rng, 4, rho=0.8)
    g = impulse_response(model, 30)
    S = np.linalg.svd(markov_hankel(g, 8, 8), compute_uv=False)
    real = ho_kalman_kung(g, RealizationConfig(N=8, H=8, epsilon=1.01 * S[2] / S[0]))
    assert real.s == 2
    err = markov_reconstruction_error(real, g[:15]) * np.max(np.abs(g))
    # the rank-2 factorization drops sigma_3 and below; the Markov error is of that scale
    assert err <= 10 * np.sum(S[2:])
