"""Block-Hankel construction, past/future partitioning and excitation checks.

Sequences are stored column-wise, shape ``(d, D)``. Outputs follow the
convention ``Y[:, i] = y_{i+1}`` while inputs use ``U[:, i] = u_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientData
from .numerics import numerical_rank


def as_sequence(v) -> np.ndarray:
    """Coerce a signal to shape ``(d, D)``; 1-D input is a scalar signal."""
    a = np.asarray(v, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionMismatch(f"sequence must be 1-D or 2-D, got shape {a.shape}")
    return a


def build_hankel(v, start: int, N: int, H: int) -> np.ndarray:
    """Block Hankel with ``N`` block rows and ``H`` columns; block (i, j) = v[start+i+j]."""
    v = as_sequence(v)
    d, D = v.shape
    if N < 1 or H < 1 or start < 0:
        raise InsufficientData(f"need N >= 1, H >= 1, start >= 0 (got {N}, {H}, {start})")
    if start + N + H - 1 > D:
        raise InsufficientData(f"sequence of length {D} too short for start={start}, N={N}, H={H}")
    out = np.empty((d * N, H))
    for i in range(N):
        out[i * d:(i + 1) * d, :] = v[:, start + i:start + i + H]
    return out


@dataclass(frozen=True)
class HankelBlocks:
    Up: np.ndarray
    Yp: np.ndarray
    Uf: np.ndarray
    Yf: np.ndarray
    N: int
    M: int
    H: int

    @property
    def m(self) -> int:
        return self.Up.shape[0] // self.M

    @property
    def p(self) -> int:
        return self.Yp.shape[0] // self.M

    def stacked(self) -> np.ndarray:
        return np.vstack([self.Up, self.Yp, self.Uf, self.Yf])


def partition_past_future(U, Y, N: int, M: int, H: int) -> HankelBlocks:
    """Past (M rows) and future (N rows) Hankel blocks from one data record.

    Column j holds u_j..u_{j+M-1}, y_{j+1}..y_{j+M} in the past blocks and
    u_{j+M}..u_{j+M+N-1}, y_{j+M+1}..y_{j+M+N} in the future blocks.
    """
    U, Y = as_sequence(U), as_sequence(Y)
    if U.shape[1] != Y.shape[1]:
        raise DimensionMismatch(f"U has {U.shape[1]} samples, Y has {Y.shape[1]}")
    D = U.shape[1]
    if M + N + H - 1 > D:
        raise InsufficientData(f"M + N + H - 1 = {M + N + H - 1} exceeds data length D = {D}")
    return HankelBlocks(
        Up=build_hankel(U, 0, M, H),
        Yp=build_hankel(Y, 0, M, H),
        Uf=build_hankel(U, M, N, H),
        Yf=build_hankel(Y, M, N, H),
        N=N,
        M=M,
        H=H,
    )


def is_persistently_exciting(u, L: int, return_rank: bool = False):
    """True iff the L-block Hankel of ``u`` has full row rank ``m * L``."""
    u = as_sequence(u)
    m, D = u.shape
    H = D - L + 1
    if L < 1 or H < m * L:
        raise InsufficientData(f"length {D} cannot give {m * L} independent columns for order L={L}")
    rank = numerical_rank(build_hankel(u, 0, L, H))
    ok = rank == m * L
    return (ok, rank) if return_rank else ok


def ctrb_obsv_rank(model) -> tuple[int, int]:
    """Ranks of the controllability and observability matrices."""
    A, B, C = model.A, model.B, model.C
    n = A.shape[0]
    blocks_c, blocks_o = [B], [C]
    for _ in range(n - 1):
        blocks_c.append(A @ blocks_c[-1])
        blocks_o.append(blocks_o[-1] @ A)
    ctrb = np.hstack(blocks_c)
    obsv = np.vstack(blocks_o)
    rc = numerical_rank(ctrb) if np.any(ctrb) else 0
    ro = numerical_rank(obsv) if np.any(obsv) else 0
    return rc, ro
