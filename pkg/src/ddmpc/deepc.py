"""Data-enabled predictive control built on the block-Hankel trajectory library."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hankel import HankelBlocks, is_persistently_exciting, partition_past_future
from .mpc import BoxConstraints, ControlMove, MpcWeights
from .numerics import QpProblem, solve_qp
from .spc import PastWindow, SpcPredictor, spc_predict


@dataclass
class DeepcConfig:
    blocks: HankelBlocks
    weights: MpcWeights
    bounds: BoxConstraints
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.weights.N != self.blocks.N:
            raise ValueError("weights horizon must equal the Hankel future horizon")

    @classmethod
    def from_data(cls, U, Y, N: int, M: int, H: int, weights: MpcWeights, bounds: BoxConstraints, alpha: float = 1.0):
        return cls(partition_past_future(U, Y, N, M, H), weights, bounds, alpha)


@dataclass
class DeepcSolution:
    U: np.ndarray
    Y: np.ndarray
    v: np.ndarray
    cost: float
    status: str
    hankel_residual: float


def check_pe_for_deepc(u, N: int, M: int, n_est: int) -> bool:
    return bool(is_persistently_exciting(u, N + M + n_est))


def deepc_qp(cfg: DeepcConfig, past: PastWindow, Yr, U_fixed=None) -> QpProblem:
    """QP over z = (U_k, Y_{k+1}, v) with the Hankel equality passed natively."""
    b = cfg.blocks
    N, m, p, H = b.N, b.m, b.p, b.H
    nu, ny = m * N, p * N
    nz = nu + ny + H
    Yr = np.asarray(Yr, dtype=float).reshape(-1)
    if Yr.size == p:
        Yr = np.tile(Yr, N)
    Q, R = cfg.weights.QN, cfg.weights.RN
    Hm = np.zeros((nz, nz))
    Hm[:nu, :nu] = R
    Hm[nu:nu + ny, nu:nu + ny] = Q
    Hm[nu + ny:, nu + ny:] = cfg.alpha * np.eye(H)
    q = np.zeros(nz)
    q[nu:nu + ny] = -2.0 * Q @ Yr

    rp_u, rp_y = b.Up.shape[0], b.Yp.shape[0]
    Feq = np.zeros((rp_u + rp_y + nu + ny, nz))
    Feq[:, nu + ny:] = b.stacked()
    Feq[rp_u + rp_y:rp_u + rp_y + nu, :nu] = -np.eye(nu)
    Feq[rp_u + rp_y + nu:, nu:nu + ny] = -np.eye(ny)
    geq = np.concatenate([past.Up1, past.Yp1, np.zeros(nu + ny)])
    if U_fixed is not None:
        Fu = np.zeros((nu, nz))
        Fu[:, :nu] = np.eye(nu)
        Feq = np.vstack([Feq, Fu])
        geq = np.concatenate([geq, np.asarray(U_fixed, float).reshape(-1)])

    c = cfg.bounds
    Fu_, gu_ = BoxConstraints.lift(c.u_lb, c.u_ub, m, N)
    Fy_, gy_ = BoxConstraints.lift(c.y_lb, c.y_ub, p, N)
    F = np.zeros((Fu_.shape[0] + Fy_.shape[0], nz))
    F[:Fu_.shape[0], :nu] = Fu_
    F[Fu_.shape[0]:, nu:nu + ny] = Fy_
    return QpProblem(H=Hm, q=q, F=F, g=np.concatenate([gu_, gy_]), Feq=Feq, geq=geq)


def deepc_control_step(cfg: DeepcConfig, past: PastWindow, Yr, U_fixed=None, warm: Optional[np.ndarray] = None) -> DeepcSolution:
    b = cfg.blocks
    nu, ny = b.m * b.N, b.p * b.N
    qp = deepc_qp(cfg, past, Yr, U_fixed)
    res = solve_qp(qp, z0=warm)
    z = res.z
    Yr_s = np.asarray(Yr, float).reshape(-1)
    if Yr_s.size == b.p:
        Yr_s = np.tile(Yr_s, b.N)
    cost = res.objective + float(Yr_s @ cfg.weights.QN @ Yr_s)
    resid = float(np.max(np.abs(qp.Feq @ z - qp.geq)))
    return DeepcSolution(U=z[:nu], Y=z[nu:nu + ny], v=z[nu + ny:], cost=cost, status="optimal", hankel_residual=resid)


def deepc_vs_spc_gap(cfg: DeepcConfig, pred: SpcPredictor, probes) -> float:
    """Max |Y_deepc(U fixed) - Y_spc| over (past, U) probes; 0 for no probes."""
    gap = 0.0
    for past, U in probes:
        sol = deepc_control_step(cfg, past, np.zeros(cfg.blocks.p), U_fixed=U)
        gap = max(gap, float(np.max(np.abs(sol.Y - spc_predict(pred, past, U)))))
    return gap


class DeepcController:
    def __init__(self, cfg: DeepcConfig):
        self.cfg = cfg

    def __call__(self, ctx):
        M = self.cfg.blocks.M
        past = PastWindow.from_history(ctx.u_hist, ctx.y_hist, M)
        sol = deepc_control_step(self.cfg, past, ctx.r)
        return ControlMove(U=sol.U, cost=sol.cost, status=sol.status)
