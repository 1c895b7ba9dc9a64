import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddmpc.errors import DimensionMismatch, InsufficientData
from ddmpc.hankel import build_hankel, ctrb_obsv_rank, is_persistently_exciting, partition_past_future
from ddmpc.plants import LinearModel, PrmsConfig, prms

seqs = st.integers(0, 2**31 - 1).flatmap(
    lambda s: st.tuples(st.just(s), st.integers(1, 3), st.integers(8, 40))
)


def test_build_hankel_scalar():
    np.testing.assert_array_equal(build_hankel([1, 2, 3, 4], 0, 2, 3), [[1, 2, 3], [2, 3, 4]])
    v = np.arange(6.0)
    np.testing.assert_array_equal(build_hankel(v, 0, 1, 6), v[None, :])


def test_build_hankel_vector_index_oracle():
    v = np.arange(10.0).reshape(2, 5)
    Hk = build_hankel(v, 0, 2, 3)
    assert Hk.shape == (4, 3)
    for i in range(2):
        for j in range(3):
            np.testing.assert_array_equal(Hk[2 * i:2 * i + 2, j], v[:, i + j])


def test_build_hankel_too_short():
    with pytest.raises(InsufficientData):
        build_hankel(np.arange(4.0), 0, 3, 3)


def test_partition_hand_enumeration():
    u = np.arange(1.0, 11.0)
    y = 10 * u
    b = partition_past_future(u, y, 2, 2, 3)
    np.testing.assert_array_equal(b.Up, [[1, 2, 3], [2, 3, 4]])
    np.testing.assert_array_equal(b.Uf, [[3, 4, 5], [4, 5, 6]])
    np.testing.assert_array_equal(b.Yp, [[10, 20, 30], [20, 30, 40]])
    np.testing.assert_array_equal(b.Yf, [[30, 40, 50], [40, 50, 60]])


def test_partition_boundary_and_stacking():
    N, M, H = 3, 3, 4
    D = N + M + H - 1
    u = np.arange(D, dtype=float)
    b = partition_past_future(u, u, N, M, H)
    assert b.Uf[-1, -1] == u[-1]
    np.testing.assert_array_equal(np.vstack([b.Up, b.Uf]), build_hankel(u, 0, 2 * N, H))
    with pytest.raises(InsufficientData):
        partition_past_future(u[:-1], u[:-1], N, M, H)
    with pytest.raises(DimensionMismatch):
        partition_past_future(u, u[:-1], 1, 1, 1)


@given(seqs)
def test_hankel_shift_structure(args):
    seed, d, D = args
    v = np.random.default_rng(seed).standard_normal((d, D))
    N = max(1, D // 4)
    H = D - N
    Hk = build_hankel(v, 0, N, H)
    # moving one block row down equals moving one column right
    np.testing.assert_array_equal(Hk[d:, :-1], Hk[:-d, 1:])
    np.testing.assert_array_equal(build_hankel(v, 1, N, H - 1), Hk[:, 1:])


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_pe_monotone_in_order(seed, L):
    u = np.random.default_rng(seed).standard_normal(60)
    ok_L, r_L = is_persistently_exciting(u, L + 1, return_rank=True)
    ok_l, r_l = is_persistently_exciting(u, L, return_rank=True)
    assert r_L >= r_l
    if ok_L:
        assert ok_l


def test_pe_examples():
    assert not is_persistently_exciting(np.ones(50), 2)
    assert is_persistently_exciting(np.random.default_rng(0).standard_normal(200), 5)
    u = prms(PrmsConfig(seed=0), 500)
    assert is_persistently_exciting(u, 54)
    with pytest.raises(InsufficientData):
        is_persistently_exciting(np.ones(5), 4)


def test_ctrb_obsv_rank(lti3):
    assert ctrb_obsv_rank(LinearModel([[0.0]], [[1.0]], [[1.0]])) == (1, 1)
    assert ctrb_obsv_rank(lti3) == (3, 3)
    assert ctrb_obsv_rank(LinearModel(np.eye(2), np.ones((2, 1)), np.zeros((1, 2))))[1] == 0
