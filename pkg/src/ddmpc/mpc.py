"""Conventional MPC machinery: prediction matrices, QP/NLP assembly, closed loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DdmpcError, DimensionMismatch, Infeasible, SolverFailure
from .numerics import NlpProblem, NlpResult, QpProblem, fd_jacobian, solve_nlsq, solve_root
from .plants import LinearModel, ReferenceSchedule, reference_at


@dataclass
class MpcWeights:
    Q: np.ndarray
    R: np.ndarray
    N: int

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if np.min(np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (self.R + self.R.T))) < -1e-12:
            raise ValueError("R must be positive semidefinite")

    @property
    def QN(self) -> np.ndarray:
        return np.kron(np.eye(self.N), self.Q)

    @property
    def RN(self) -> np.ndarray:
        return np.kron(np.eye(self.N), self.R)


def _bound(v, dim):
    if v is None:
        return None
    return np.broadcast_to(np.asarray(v, dtype=float).reshape(-1), (dim,)).copy()


@dataclass
class BoxConstraints:
    """Per-step box bounds; any side may be ``None`` (unbounded)."""

    u_lb: Optional[np.ndarray] = None
    u_ub: Optional[np.ndarray] = None
    y_lb: Optional[np.ndarray] = None
    y_ub: Optional[np.ndarray] = None
    x_lb: Optional[np.ndarray] = None
    x_ub: Optional[np.ndarray] = None

    def __post_init__(self):
        for lo, hi in (("u_lb", "u_ub"), ("y_lb", "y_ub"), ("x_lb", "x_ub")):
            a, b = getattr(self, lo), getattr(self, hi)
            if a is not None and b is not None and np.any(np.asarray(a) > np.asarray(b)):
                raise ValueError(f"{lo} exceeds {hi}")

    @staticmethod
    def lift(lb, ub, dim: int, N: int):
        """Stacked rows (F, g) with F v <= g for N copies of lb <= v <= ub."""
        lb, ub = _bound(lb, dim), _bound(ub, dim)
        rows, rhs = [], []
        eye = np.eye(dim * N)
        if ub is not None:
            fin = np.isfinite(np.tile(ub, N))
            rows.append(eye[fin])
            rhs.append(np.tile(ub, N)[fin])
        if lb is not None:
            fin = np.isfinite(np.tile(lb, N))
            rows.append(-eye[fin])
            rhs.append(-np.tile(lb, N)[fin])
        if not rows:
            return np.zeros((0, dim * N)), np.zeros(0)
        return np.vstack(rows), np.concatenate(rhs)

    def input_bounds(self, m: int, N: int):
        lb = _bound(self.u_lb, m)
        ub = _bound(self.u_ub, m)
        return (None if lb is None else np.tile(lb, N)), (None if ub is None else np.tile(ub, N))


@dataclass(frozen=True)
class PredictionMatrices:
    AX: np.ndarray
    BX: np.ndarray
    AY: np.ndarray
    BY: np.ndarray
    N: int


def build_prediction_matrices(model: LinearModel, N: int) -> PredictionMatrices:
    """X = AX x + BX U and Y = AY x + BY U for x_{k+1..k+N}, y_{k+1..k+N}."""
    n, m, p = model.n, model.m, model.p
    A, B, C = model.A, model.B, model.C
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    AX = np.vstack(powers[1:])
    BX = np.zeros((n * N, m * N))
    for i in range(N):
        for j in range(i + 1):
            BX[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - j] @ B
    CN = np.kron(np.eye(N), C)
    return PredictionMatrices(AX=AX, BX=BX, AY=CN @ AX, BY=CN @ BX, N=N)


def _stack_ref(r, dim: int, N: int) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(-1)
    if r.size == dim:
        return np.tile(r, N)
    if r.size != dim * N:
        raise DimensionMismatch(f"reference must have length {dim} or {dim * N}, got {r.size}")
    return r


def _lmpc_qp(Apred, Bpred, w: MpcWeights, x_now, Ref, Ur, F_traj, g_traj, c: BoxConstraints, m: int):
    N = w.N
    dim = Apred.shape[0] // N
    Ref = _stack_ref(Ref, dim, N)
    Ur = np.zeros(m * N) if Ur is None else _stack_ref(Ur, m, N)
    QN, RN = w.QN, w.RN
    if QN.shape[0] != dim * N or RN.shape[0] != m * N:
        raise DimensionMismatch("weight dimensions do not match the prediction matrices")
    free = Apred @ x_now
    H = Bpred.T @ QN @ Bpred + RN
    q = 2.0 * Bpred.T @ QN @ (free - Ref) - 2.0 * RN @ Ur
    Fu, gu = BoxConstraints.lift(c.u_lb, c.u_ub, m, N)
    F = np.vstack([F_traj @ Bpred, Fu])
    g = np.concatenate([g_traj - F_traj @ free, gu])
    return QpProblem(H=0.5 * (H + H.T), q=q, F=F, g=g)


def assemble_output_lmpc_qp(pm: PredictionMatrices, w: MpcWeights, c: BoxConstraints, x_now, Yr, Ur=None) -> QpProblem:
    x_now = np.asarray(x_now, dtype=float).reshape(-1)
    p = pm.AY.shape[0] // pm.N
    m = pm.BY.shape[1] // pm.N
    Fy, gy = BoxConstraints.lift(c.y_lb, c.y_ub, p, pm.N)
    return _lmpc_qp(pm.AY, pm.BY, w, x_now, Yr, Ur, Fy, gy, c, m)


def assemble_state_lmpc_qp(pm: PredictionMatrices, w: MpcWeights, c: BoxConstraints, x_now, Xr, Ur=None) -> QpProblem:
    x_now = np.asarray(x_now, dtype=float).reshape(-1)
    n = pm.AX.shape[0] // pm.N
    m = pm.BX.shape[1] // pm.N
    Fx, gx = BoxConstraints.lift(c.x_lb, c.x_ub, n, pm.N)
    return _lmpc_qp(pm.AX, pm.BX, w, x_now, Xr, Ur, Fx, gx, c, m)


def lmpc_cost(pm: PredictionMatrices, w: MpcWeights, x_now, Ref, U, Ur=None, state: bool = False) -> float:
    """Original (unexpanded) quadratic tracking cost of an input sequence."""
    Apred, Bpred = (pm.AX, pm.BX) if state else (pm.AY, pm.BY)
    dim = Apred.shape[0] // pm.N
    m = Bpred.shape[1] // pm.N
    U = np.asarray(U, dtype=float).reshape(-1)
    Ur = np.zeros(m * pm.N) if Ur is None else _stack_ref(Ur, m, pm.N)
    e = _stack_ref(Ref, dim, pm.N) - (Apred @ x_now + Bpred @ U)
    du = U - Ur
    return float(e @ w.QN @ e + du @ w.RN @ du)


# ---------------------------------------------------------------------------
# NMPC
# ---------------------------------------------------------------------------

Predictor = Callable[[np.ndarray], tuple]
"""``predictor(U) -> (P, J)``: stacked predicted trajectory and dP/dU (or None)."""


def assemble_nmpc_nlp(
    predictor: Predictor,
    w: MpcWeights,
    c: BoxConstraints,
    Ref,
    Ur=None,
    U_init=None,
    m: int = 1,
    traj_bounds: tuple = (None, None),
) -> NlpProblem:
    """Quadratic tracking NLP over U composed with a nonlinear rollout.

    Input bounds become native variable bounds; bounds on the predicted
    trajectory (``traj_bounds``, per step) become inequality functions.
    ``x_now`` is captured by the predictor closure.
    """
    N = w.N
    dim = w.Q.shape[0]
    Ref = _stack_ref(Ref, dim, N)
    Ur = np.zeros(m * N) if Ur is None else _stack_ref(Ur, m, N)
    QN, RN = w.QN, w.RN
    U0 = Ur.copy() if U_init is None else np.asarray(U_init, dtype=float).reshape(-1)
    cache: dict = {}

    def rollout(U):
        key = U.tobytes()
        if cache.get("key") != key:
            P, J = predictor(U)
            if J is None:
                J = fd_jacobian(lambda V: predictor(V)[0], U)
            cache.update(key=key, P=np.asarray(P, float), J=np.asarray(J, float))
        return cache["P"], cache["J"]

    def cost(U):
        P, _ = rollout(U)
        e = P - Ref
        du = U - Ur
        return float(e @ QN @ e + du @ RN @ du)

    def grad(U):
        P, J = rollout(U)
        return 2.0 * J.T @ (QN @ (P - Ref)) + 2.0 * RN @ (U - Ur)

    lo, hi = traj_bounds
    Ft, gt = BoxConstraints.lift(lo, hi, dim, N)
    ineq = ineq_jac = None
    if Ft.shape[0]:
        def ineq(U):
            return Ft @ rollout(U)[0] - gt

        def ineq_jac(U):
            return Ft @ rollout(U)[1]

    lb, ub = c.input_bounds(m, N)
    return NlpProblem(cost=cost, grad=grad, z0=U0, ineq=ineq, ineq_jac=ineq_jac, lb=lb, ub=ub)


def _sqrt_psd(M) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def greedy_inputs(step, s0, ref, u0, lb=None, ub=None, N: int = 1, Q=None, reg: float = 1e-6) -> np.ndarray:
    """Stacked inputs that drive each one-step prediction of ``step(s, u)`` onto ``ref``.

    Each input is a bounded least-squares one-step inversion, so the rollout
    stays near the reference even for an open-loop unstable model; ``reg``
    lightly pulls each input toward ``u0`` for uniqueness.
    """
    u0 = np.asarray(u0, float).reshape(-1)
    ref = np.asarray(ref, float).reshape(-1)
    Qh = np.eye(ref.size) if Q is None else _sqrt_psd(np.atleast_2d(Q))
    m = u0.size
    lo = None if lb is None else np.broadcast_to(np.asarray(lb, float).reshape(-1), (N * m,))
    hi = None if ub is None else np.broadcast_to(np.asarray(ub, float).reshape(-1), (N * m,))
    s = np.asarray(s0, float).reshape(-1)
    out = np.empty(N * m)
    for k in range(N):
        kl = None if lo is None else lo[k * m:(k + 1) * m]
        kh = None if hi is None else hi[k * m:(k + 1) * m]
        guess = u0 if kl is None and kh is None else np.clip(u0, -np.inf if kl is None else kl, np.inf if kh is None else kh)
        uk, _ = solve_root(
            lambda u, s=s: np.concatenate([Qh @ (np.asarray(step(s, u), float).reshape(-1) - ref), reg * (u - u0)]),
            guess, lb=kl, ub=kh, xtol=1e-10,
        )
        out[k * m:(k + 1) * m] = uk
        s = np.asarray(step(s, uk), float).reshape(-1)
        if not np.all(np.isfinite(s)):
            out[(k + 1) * m:] = np.tile(uk, N - k - 1)
            break
    return out


def solve_nmpc_tracking(
    predictor: Predictor, w: MpcWeights, c: BoxConstraints, Ref, Ur=None, U_init=None, m: int = 1,
    tol: float = 1e-8, max_nfev: int = 200, extra_starts=(),
) -> NlpResult:
    """Input-bounded tracking NMPC solved as Gauss-Newton least squares.

    Same cost as ``assemble_nmpc_nlp`` without trajectory bounds: the
    residual is ``[Q^(1/2) (P(U) - Ref); R^(1/2) (U - Ur)]``. Besides
    ``U_init``, the constant ``Ur`` and any ``extra_starts`` are candidate
    starts; the lowest final cost wins.
    """
    N = w.N
    dim = w.Q.shape[0]
    Ref = _stack_ref(Ref, dim, N)
    Ur = np.zeros(m * N) if Ur is None else _stack_ref(Ur, m, N)
    U0 = Ur.copy() if U_init is None else np.asarray(U_init, dtype=float).reshape(-1)
    Qh, Rh = np.kron(np.eye(N), _sqrt_psd(w.Q)), np.kron(np.eye(N), _sqrt_psd(w.R))
    cache: dict = {}

    def rollout(U):
        key = U.tobytes()
        if cache.get("key") != key:
            P, J = predictor(U)
            if J is None:
                J = fd_jacobian(lambda V: predictor(V)[0], U)
            cache.update(key=key, P=np.asarray(P, float), J=np.asarray(J, float))
        return cache["P"], cache["J"]

    def residual(U):
        P, _ = rollout(U)
        return np.concatenate([Qh @ (P - Ref), Rh @ (U - Ur)])

    def jac(U):
        return np.vstack([Qh @ rollout(U)[1], Rh])

    lb, ub = c.input_bounds(m, N)

    def cost0(z):
        r = residual(np.clip(z, -np.inf if lb is None else lb, np.inf if ub is None else ub))
        return float(r @ r) if np.all(np.isfinite(r)) else np.inf

    # The shifted warm start can sit in the basin of a runaway prediction, so
    # alternative starts are tried whenever the first solve ends above their
    # initial cost.
    others = [np.asarray(z, float).reshape(-1) for z in extra_starts]
    if not np.allclose(U0, Ur):
        others.append(Ur)
    best = solve_nlsq(residual, jac, U0, lb, ub, tol=tol, max_nfev=max_nfev)
    for z0 in sorted(others, key=cost0):
        if cost0(z0) >= best.fun:
            continue
        cache.clear()
        res = solve_nlsq(residual, jac, z0, lb, ub, tol=tol, max_nfev=max_nfev)
        if res.fun < best.fun:
            best = res
    return best


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


@dataclass
class ControlMove:
    U: np.ndarray
    cost: float = float("nan")
    status: str = "optimal"
    x_est: Optional[np.ndarray] = None


@dataclass
class LoopContext:
    k: int
    y: np.ndarray
    r: np.ndarray
    u_hist: list
    y_hist: list
    warm: Optional[np.ndarray]


@dataclass
class ClosedLoopTrace:
    U: np.ndarray
    Y: np.ndarray
    R: np.ndarray
    X: Optional[np.ndarray]
    cost: np.ndarray
    status: list
    solve_time: float = 0.0
    x_est: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def N_T(self) -> int:
        return self.U.shape[0]

    def tracking_errors(self, schedule: ReferenceSchedule, last: int) -> list:
        """Max |y - r| over the final ``last`` instants of each schedule segment."""
        out = []
        for a, b in schedule.segments(self.N_T):
            lo = max(a, b - last)
            out.append(float(np.max(np.abs(self.Y[lo:b] - self.R[lo:b]))))
        return out


def shift_warm_start(U: np.ndarray, m: int) -> np.ndarray:
    U = np.asarray(U, dtype=float).reshape(-1)
    return np.concatenate([U[m:], U[-m:]])


def run_receding_horizon(
    plant_step: Callable,
    plant_output: Callable,
    controller: Callable[[LoopContext], ControlMove],
    x0,
    schedule: ReferenceSchedule,
    N_T: int,
    m: int,
    replay_inputs: Optional[np.ndarray] = None,
    history: Optional[tuple] = None,
) -> ClosedLoopTrace:
    """Receding-horizon loop with ``plant_step(x, u) -> x_next`` and ``plant_output(x) -> y``.

    For instants covered by ``replay_inputs`` (shape (m, K)) the given input is
    applied instead of calling the controller. An infeasible step falls back to
    the previous input and is flagged; any other solver error is re-raised as
    :class:`SolverFailure` carrying the instant. ``history = (U_past, Y_past)``
    (each with K columns: inputs u_{-K..-1} and outputs y_{-K..-1}) prefills the
    histories the controller sees.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    n = x.size
    X = np.empty((N_T, n))
    U = np.empty((N_T, m))
    Ys, Rs, costs, status, xest = [], [], np.full(N_T, np.nan), [], []
    u_hist: list = []
    y_hist: list = []
    if history is not None:
        Up, Yp = (np.atleast_2d(np.asarray(a, dtype=float)) for a in history)
        if Up.shape[1] != Yp.shape[1]:
            raise DimensionMismatch("history inputs and outputs must have the same length")
        u_hist = [Up[:, j].copy() for j in range(Up.shape[1])]
        y_hist = [Yp[:, j].copy() for j in range(Yp.shape[1])]
    warm = None
    u_prev = np.zeros(m)
    nrep = 0 if replay_inputs is None else np.asarray(replay_inputs).shape[1]
    t0 = time.perf_counter()
    for k in range(N_T):
        X[k] = x
        y = np.asarray(plant_output(x), dtype=float).reshape(-1)
        r = reference_at(schedule, k)
        y_hist.append(y)
        if k < nrep:
            u = np.asarray(replay_inputs, dtype=float)[:, k]
            st = "replay"
            xest.append(None)
        else:
            ctx = LoopContext(k=k, y=y, r=r, u_hist=u_hist, y_hist=y_hist, warm=warm)
            try:
                mv = controller(ctx)
                u = np.asarray(mv.U, dtype=float).reshape(-1)[:m]
                warm = shift_warm_start(mv.U, m)
                costs[k] = mv.cost
                st = mv.status
                xest.append(mv.x_est)
            except Infeasible:
                u = u_prev
                st = "infeasible_fallback"
                warm = None
                xest.append(None)
            except DdmpcError as e:
                raise SolverFailure(k, e) from e
        U[k] = u
        Ys.append(y)
        Rs.append(np.broadcast_to(r, y.shape).copy())
        status.append(st)
        u_hist.append(u.copy())
        u_prev = u
        x = np.asarray(plant_step(x, u), dtype=float).reshape(-1)
    dt = time.perf_counter() - t0
    have_est = [e for e in xest if e is not None]
    XE = None
    if have_est:
        d = np.asarray(have_est[0]).size
        XE = np.full((N_T, d), np.nan)
        for k, e in enumerate(xest):
            if e is not None:
                XE[k] = e
    return ClosedLoopTrace(
        U=U, Y=np.array(Ys), R=np.array(Rs), X=X, cost=costs, status=status, solve_time=dt, x_est=XE, extra={"x_final": x}
    )


# ---------------------------------------------------------------------------
# State estimation
# ---------------------------------------------------------------------------


class OpenLoopObserver:
    """Simulates a state-space model in parallel with the applied inputs."""

    def __init__(self, step: Callable, x0):
        self.step = step
        self.x = np.asarray(x0, dtype=float).reshape(-1).copy()
        self._seen = 0

    def update(self, u_hist: list) -> np.ndarray:
        while self._seen < len(u_hist):
            self.x = self.step(self.x, u_hist[self._seen])
            self._seen += 1
        return self.x


class MovingHorizonEstimator:
    """Least-squares estimate of the current state from the last ``window`` samples.

    The state at the start of the window is fitted so that ``h`` of the rolled
    out trajectory matches the measured outputs; a weak prior on the previous
    estimate keeps the problem well posed.
    """

    def __init__(self, step: Callable, output: Callable, x0, window: int = 10, prior_weight: float = 1e-3):
        self.step = step
        self.output = output
        self.window = window
        self.prior_weight = prior_weight
        self.x_start = np.asarray(x0, dtype=float).reshape(-1).copy()
        self.x_prior = self.x_start.copy()

    def _roll(self, xs, us):
        x = xs
        xs_all = [x]
        for u in us:
            x = self.step(x, u)
            xs_all.append(x)
        return xs_all

    def update(self, u_hist: list, y_hist: list) -> np.ndarray:
        K = len(y_hist)
        w = min(self.window, K)
        us = u_hist[K - w:K - 1]
        ys = np.array(y_hist[K - w:K])
        if K > w:
            x_guess = self.step(self.x_prior, u_hist[K - w - 1])
        else:
            x_guess = self.x_start
        sw = np.sqrt(self.prior_weight)

        def resid(xs):
            traj = self._roll(xs, us)
            out = np.concatenate([np.asarray(self.output(x)).reshape(-1) for x in traj])
            return np.concatenate([out - ys.reshape(-1), sw * (xs - x_guess)])

        xs, _ = solve_root(resid, x_guess, xtol=1e-12)
        self.x_prior = xs
        return self._roll(xs, us)[-1]
