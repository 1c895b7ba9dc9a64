"""Subspace predictive control: least-squares multi-step predictor from Hankel data."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, ExcitationWarning, InsufficientData, RankDeficientWarning
from .hankel import HankelBlocks, as_sequence, is_persistently_exciting, partition_past_future
from .mpc import BoxConstraints, ControlMove, MpcWeights
from .numerics import QpProblem, QpResult, pinv, solve_qp


@dataclass(frozen=True)
class SpcPredictor:
    P1: np.ndarray
    P2: np.ndarray
    BY: np.ndarray
    N: int
    M: int
    residual: float = float("nan")

    @property
    def m(self) -> int:
        return self.P1.shape[1] // self.M

    @property
    def p(self) -> int:
        return self.P2.shape[1] // self.M


@dataclass(frozen=True)
class PastWindow:
    """Up1 = (u_{k-M}, ..., u_{k-1}) and Yp1 = (y_{k-M+1}, ..., y_k), stacked."""

    Up1: np.ndarray
    Yp1: np.ndarray

    @classmethod
    def from_history(cls, u_hist, y_hist, M: int) -> "PastWindow":
        """``u_hist`` ends with u_{k-1}; ``y_hist`` ends with y_k."""
        if len(u_hist) < M or len(y_hist) < M:
            raise InsufficientData(f"need {M} past samples, have {len(u_hist)} inputs and {len(y_hist)} outputs")
        up = np.concatenate([np.asarray(u, float).reshape(-1) for u in u_hist[-M:]])
        yp = np.concatenate([np.asarray(y, float).reshape(-1) for y in y_hist[-M:]])
        return cls(up, yp)

    @classmethod
    def from_data(cls, U, Y, j: int, M: int) -> "PastWindow":
        """Past window of Hankel column ``j`` of the data record (U, Y)."""
        U, Y = as_sequence(U), as_sequence(Y)
        return cls(U[:, j:j + M].T.reshape(-1), Y[:, j:j + M].T.reshape(-1))


def identify_spc(U, Y, N: int, M: int, H: int, n_est: Optional[int] = None) -> SpcPredictor:
    """Fit Y_f = P1 U_p + P2 Y_p + BY U_f by pseudoinverse least squares."""
    blocks = partition_past_future(U, Y, N, M, H)
    return identify_spc_blocks(blocks, U if n_est is not None else None, n_est)


def identify_spc_blocks(blocks: HankelBlocks, U=None, n_est: Optional[int] = None) -> SpcPredictor:
    if U is not None and n_est is not None:
        L = blocks.N + blocks.M + n_est
        try:
            ok = is_persistently_exciting(U, L)
        except InsufficientData:
            ok = False
        if not ok:
            warnings.warn(f"input is not persistently exciting of order {L}", ExcitationWarning, stacklevel=2)
    S = np.vstack([blocks.Up, blocks.Yp, blocks.Uf])
    # Noiseless LTI data always makes Yp rank deficient; only warn when the
    # column count cannot support a full-rank S.
    if S.shape[1] < S.shape[0]:
        warnings.warn(
            f"data matrix S ({S.shape[0]}x{S.shape[1]}) has fewer columns than rows; using pseudoinverse",
            RankDeficientWarning,
            stacklevel=2,
        )
    P = blocks.Yf @ pinv(S)
    res = float(np.linalg.norm(blocks.Yf - P @ S) / max(np.linalg.norm(blocks.Yf), np.finfo(float).tiny))
    a, b = blocks.Up.shape[0], blocks.Yp.shape[0]
    return SpcPredictor(P1=P[:, :a], P2=P[:, a:a + b], BY=P[:, a + b:], N=blocks.N, M=blocks.M, residual=res)


def spc_predict(pred: SpcPredictor, past: PastWindow, U_k) -> np.ndarray:
    U_k = np.asarray(U_k, dtype=float).reshape(-1)
    if past.Up1.size != pred.P1.shape[1] or past.Yp1.size != pred.P2.shape[1] or U_k.size != pred.BY.shape[1]:
        raise DimensionMismatch("past window or input sequence does not match the predictor")
    return pred.P1 @ past.Up1 + pred.P2 @ past.Yp1 + pred.BY @ U_k


def spc_qp(pred: SpcPredictor, past: PastWindow, Yr, w: MpcWeights, c: BoxConstraints) -> QpProblem:
    """QP in U_k: [Yr - Y]'Q[Yr - Y] + U_k' R U_k with input and optional output boxes."""
    N, m, p = pred.N, pred.m, pred.p
    Yr = np.asarray(Yr, dtype=float).reshape(-1)
    if Yr.size == p:
        Yr = np.tile(Yr, N)
    free = pred.P1 @ past.Up1 + pred.P2 @ past.Yp1
    QN, RN = w.QN, w.RN
    H = pred.BY.T @ QN @ pred.BY + RN
    q = 2.0 * pred.BY.T @ QN @ (free - Yr)
    Fu, gu = BoxConstraints.lift(c.u_lb, c.u_ub, m, N)
    Fy, gy = BoxConstraints.lift(c.y_lb, c.y_ub, p, N)
    F = np.vstack([Fy @ pred.BY, Fu])
    g = np.concatenate([gy - Fy @ free, gu])
    return QpProblem(H=0.5 * (H + H.T), q=q, F=F, g=g)


def spc_control_step(pred: SpcPredictor, past: PastWindow, Yr, w: MpcWeights, c: BoxConstraints, warm=None) -> QpResult:
    qp = spc_qp(pred, past, Yr, w, c)
    res = solve_qp(qp, z0=warm)
    Yr_s = np.tile(np.asarray(Yr, float).reshape(-1), pred.N) if np.size(Yr) == pred.p else np.asarray(Yr, float)
    e = Yr_s - spc_predict(pred, past, res.z)
    res.objective = float(e @ w.QN @ e + res.z @ w.RN @ res.z)
    return res


class SpcController:
    """Receding-horizon SPC; the past window is built from the loop history."""

    def __init__(self, pred: SpcPredictor, w: MpcWeights, c: BoxConstraints):
        self.pred, self.w, self.c = pred, w, c

    def __call__(self, ctx):
        past = PastWindow.from_history(ctx.u_hist, ctx.y_hist, self.pred.M)
        res = spc_control_step(self.pred, past, ctx.r, self.w, self.c, warm=ctx.warm)
        return ControlMove(U=res.z, cost=res.objective, status="optimal")
