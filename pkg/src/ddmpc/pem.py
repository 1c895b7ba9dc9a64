"""Prediction-error identification of (A, B, C, x0) by rollout output-error minimization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SingularSteadyState
from .hankel import as_sequence
from .mpc import (
    BoxConstraints,
    ControlMove,
    MpcWeights,
    OpenLoopObserver,
    assemble_state_lmpc_qp,
    build_prediction_matrices,
)
from .numerics import NlpProblem, solve_nlp, solve_qp
from .plants import LinearModel

DIVERGENCE_LIMIT = 1e6


@dataclass
class PemParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    x0: np.ndarray

    @property
    def l(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.B.ravel(), self.C.ravel(), self.x0.ravel()])

    @classmethod
    def unpack(cls, theta, l: int, m: int, p: int) -> "PemParams":
        theta = np.asarray(theta, dtype=float)
        i = 0
        A = theta[i:i + l * l].reshape(l, l); i += l * l
        B = theta[i:i + l * m].reshape(l, m); i += l * m
        C = theta[i:i + p * l].reshape(p, l); i += p * l
        x0 = theta[i:i + l].copy()
        return cls(A.copy(), B.copy(), C.copy(), x0)

    def model(self) -> LinearModel:
        return LinearModel(self.A, self.B, self.C)


@dataclass
class SteadyStateRefs:
    x_r: np.ndarray
    u_r: np.ndarray
    residual: float


@dataclass
class PemFit:
    params: PemParams
    train_loss: float
    init_loss: float
    validation_rmse: float
    status: str


def pem_rollout(params: PemParams, U, return_states: bool = False):
    """y_hat_k = C x_k for k = 1..D with x_{k+1} = A x_k + B u_k from x0."""
    U = as_sequence(U)
    if U.shape[0] != params.m:
        raise DimensionMismatch(f"U must have {params.m} rows")
    D = U.shape[1]
    X = np.empty((params.l, D + 1))
    X[:, 0] = params.x0
    x = params.x0
    for k in range(D):
        x = params.A @ x + params.B @ U[:, k]
        X[:, k + 1] = x
    Yh = params.C @ X[:, 1:]
    return (Yh, X) if return_states else Yh


def _guard(X) -> bool:
    return bool(np.all(np.isfinite(X)) and np.max(np.abs(X), initial=0.0) <= DIVERGENCE_LIMIT)


def _penalty(Y) -> float:
    return 1e10 * (1.0 + float(np.sum(Y * Y)))


def pem_loss(params: PemParams, U, Y) -> float:
    """||Y - Y_hat||_F^2, or a large finite penalty if the rollout diverges."""
    Y = as_sequence(Y)
    with np.errstate(all="ignore"):
        Yh, X = pem_rollout(params, U, return_states=True)
    if not _guard(X):
        return _penalty(Y)
    E = Y - Yh
    return float(np.sum(E * E))


def pem_loss_grad(theta, U, Y, l: int):
    """Loss and adjoint gradient with respect to the packed parameter vector."""
    U, Y = as_sequence(U), as_sequence(Y)
    m, p = U.shape[0], Y.shape[0]
    prm = PemParams.unpack(theta, l, m, p)
    with np.errstate(all="ignore"):
        _, X = pem_rollout(prm, U, return_states=True)
    if not _guard(X):
        return _penalty(Y), np.zeros_like(theta)
    D = U.shape[1]
    E = Y - prm.C @ X[:, 1:]
    loss = float(np.sum(E * E))
    dC = -2.0 * E @ X[:, 1:].T
    G = -2.0 * prm.C.T @ E  # direct contribution of each x_k, k = 1..D
    lam = np.zeros((l, D + 1))
    acc = np.zeros(l)
    for k in range(D, 0, -1):
        acc = G[:, k - 1] + prm.A.T @ acc
        lam[:, k] = acc
    dA = lam[:, 1:] @ X[:, :-1].T
    dB = lam[:, 1:] @ U.T
    dx0 = prm.A.T @ lam[:, 1]
    return loss, np.concatenate([dA.ravel(), dB.ravel(), dC.ravel(), dx0])


def init_params(l: int, m: int, p: int, rng: np.random.Generator, scale: float = 0.1) -> PemParams:
    A = scale * rng.standard_normal((l, l))
    rho = max(np.abs(np.linalg.eigvals(A)))
    if rho > 0.9:
        A *= 0.9 / rho
    return PemParams(A, scale * rng.standard_normal((l, m)), scale * rng.standard_normal((p, l)), np.zeros(l))


def pem_identify(
    U, Y, l: int, seed: int = 0, train_fraction: float = 0.5, restarts: int = 3, max_inner: int = 5000
) -> PemFit:
    """Minimize the rollout loss on the training split; keep the best of ``restarts`` starts.

    Validation RMSE is measured on the remaining samples by continuing the
    model rollout across the whole record.
    """
    U, Y = as_sequence(U), as_sequence(Y)
    m, p = U.shape[0], Y.shape[0]
    D = U.shape[1]
    Dt = int(round(train_fraction * D))
    Ut, Yt = U[:, :Dt], Y[:, :Dt]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        p0 = init_params(l, m, p, rng)
        th0 = p0.pack()
        init_loss = pem_loss(p0, Ut, Yt)
        if max_inner == 0:
            th, status = th0, "not_run"
        else:
            prob = NlpProblem(
                cost=lambda th: pem_loss_grad(th, Ut, Yt, l)[0],
                grad=lambda th: pem_loss_grad(th, Ut, Yt, l)[1],
                z0=th0,
            )
            res = solve_nlp(prob, tol=1e-9, max_inner=max_inner)
            th, status = res.z, res.status
            if pem_loss_grad(th, Ut, Yt, l)[0] > init_loss:
                th = th0
        loss = pem_loss_grad(th, Ut, Yt, l)[0]
        if best is None or loss < best[1]:
            best = (th, loss, init_loss, status)
    th, loss, init_loss, status = best
    prm = PemParams.unpack(th, l, m, p)
    if Dt < D:
        Yh = pem_rollout(prm, U)
        rmse = float(np.sqrt(np.mean((Y[:, Dt:] - Yh[:, Dt:]) ** 2)))
    else:
        rmse = float("nan")
    return PemFit(prm, loss, init_loss, rmse, status)


def pem_steady_state(params, y_r) -> SteadyStateRefs:
    """Solve [I - A, -B; C, 0][x_r; u_r] = [0; y_r] (least squares if not square)."""
    A, B, C = params.A, params.B, params.C
    l, m = B.shape
    y_r = np.asarray(y_r, dtype=float).reshape(-1)
    K = np.block([[np.eye(l) - A, -B], [C, np.zeros((C.shape[0], m))]])
    rhs = np.concatenate([np.zeros(l), y_r])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    res = float(np.linalg.norm(K @ sol - rhs))
    if res > 1e-8 * max(1.0, np.linalg.norm(rhs)):
        raise SingularSteadyState(f"steady-state system has no exact solution (residual {res:.3e})")
    return SteadyStateRefs(sol[:l], sol[l:], res)


class StateLmpcController:
    """State-based LMPC on an identified model with an open-loop observer."""

    def __init__(self, model: LinearModel, x0, w: MpcWeights, c: BoxConstraints):
        self.model = model
        self.pm = build_prediction_matrices(model, w.N)
        self.w, self.c = w, c
        self.obs = OpenLoopObserver(lambda x, u: model.A @ x + model.B @ np.asarray(u).reshape(-1), x0)
        self._refs: dict = {}

    def refs(self, r):
        key = tuple(np.asarray(r, float).reshape(-1))
        if key not in self._refs:
            self._refs[key] = pem_steady_state(self.model, r)
        return self._refs[key]

    def __call__(self, ctx):
        x = self.obs.update(ctx.u_hist)
        ss = self.refs(ctx.r)
        qp = assemble_state_lmpc_qp(self.pm, self.w, self.c, x, ss.x_r, ss.u_r)
        res = solve_qp(qp, z0=ctx.warm)
        return ControlMove(U=res.z, cost=res.objective, status="optimal", x_est=x.copy())
