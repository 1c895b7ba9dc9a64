"""Dense linear algebra and optimization kernels.

QP convention (no 1/2 factor, matching the MPC assembly code)::

    min_z  z' H z + q' z   s.t.  F z <= g,  Feq z = geq

so the KKT stationarity condition reads ``2 H z + q + F' lam + Feq' nu = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import least_squares, linprog, minimize

from .errors import (
    DimensionMismatch,
    Infeasible,
    InvalidMatrix,
    MaxIterations,
    NonFiniteEvaluation,
    Unbounded,
)

RANK_RTOL = 1e-10


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Return ``M`` as a finite 2-D float array or raise :class:`InvalidMatrix`."""
    A = np.asarray(M, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1) if A.size else A.reshape(0, 0)
    if A.ndim != 2:
        raise InvalidMatrix(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidMatrix(f"{name} has non-finite entries")
    return A


# ---------------------------------------------------------------------------
# SVD / pseudoinverse
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def rank(self, rtol: float = RANK_RTOL) -> int:
        if self.S.size == 0 or self.S[0] == 0.0:
            return 0
        return int(np.sum(self.S > rtol * self.S[0]))

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def svd(M) -> SvdResult:
    """Thin SVD ``M = U diag(S) V'`` with nonincreasing ``S``."""
    A = as_matrix(M)
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    return SvdResult(U=U, S=S, V=Vt.T)


def numerical_rank(M, rtol: float = RANK_RTOL) -> int:
    return svd(M).rank(rtol)


def pinv(M, rtol: float = RANK_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse; singular values <= rtol * sigma_1 are dropped."""
    A = as_matrix(M)
    if A.size == 0:
        return np.zeros((A.shape[1], A.shape[0]))
    return np.linalg.pinv(A, rcond=rtol)


def null_space(M, rtol: float = RANK_RTOL) -> np.ndarray:
    A = as_matrix(M)
    if A.shape[0] == 0:
        return np.eye(A.shape[1])
    return sla.null_space(A, rcond=rtol)


# ---------------------------------------------------------------------------
# Quadratic programming
# ---------------------------------------------------------------------------


@dataclass
class QpProblem:
    H: np.ndarray
    q: np.ndarray
    F: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    Feq: Optional[np.ndarray] = None
    geq: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = as_matrix(self.H, "H")
        h = self.H.shape[0]
        if self.H.shape != (h, h):
            raise DimensionMismatch(f"H must be square, got {self.H.shape}")
        if not np.allclose(self.H, self.H.T, atol=1e-12 * max(1.0, np.abs(self.H).max(initial=0.0))):
            raise InvalidMatrix("H must be symmetric")
        self.H = 0.5 * (self.H + self.H.T)
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        if self.q.shape != (h,):
            raise DimensionMismatch(f"q must have length {h}")
        self.F, self.g = self._rows(self.F, self.g, h, "F")
        self.Feq, self.geq = self._rows(self.Feq, self.geq, h, "Feq")

    @staticmethod
    def _rows(F, g, h, name):
        if F is None:
            return np.zeros((0, h)), np.zeros(0)
        F = np.asarray(F, dtype=float).reshape(-1, h)
        g = np.asarray(g, dtype=float).reshape(-1)
        if F.shape[0] != g.shape[0]:
            raise DimensionMismatch(f"{name} has {F.shape[0]} rows but rhs has {g.shape[0]}")
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(g))):
            raise InvalidMatrix(f"{name} or its rhs has non-finite entries")
        return F, g

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(z @ self.H @ z + self.q @ z)


@dataclass
class QpResult:
    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    active: np.ndarray
    objective: float
    iterations: int
    kkt: dict = field(default_factory=dict)
    status: str = "optimal"


def kkt_residuals(p: QpProblem, z, lam, nu) -> dict:
    """Infinity-norm KKT residuals of a candidate primal-dual triple."""
    z, lam, nu = (np.asarray(a, dtype=float) for a in (z, lam, nu))
    stat = 2.0 * p.H @ z + p.q + p.F.T @ lam + p.Feq.T @ nu
    slack = p.F @ z - p.g
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal_ineq": float(np.max(np.maximum(slack, 0.0), initial=0.0)),
        "primal_eq": float(np.max(np.abs(p.Feq @ z - p.geq), initial=0.0)),
        "dual": float(np.max(np.maximum(-lam, 0.0), initial=0.0)),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
    }


def _eliminate_equalities(p: QpProblem, tol: float):
    """Return (z_p, Z) with {z : Feq z = geq} = {z_p + Z w}."""
    h = p.n
    if p.Feq.shape[0] == 0:
        return np.zeros(h), np.eye(h)
    U, S, Vt = np.linalg.svd(p.Feq, full_matrices=True)
    r = int(np.sum(S > RANK_RTOL * S[0])) if S.size and S[0] > 0 else 0
    if r == 0:
        if np.max(np.abs(p.geq)) > tol:
            raise Infeasible("equality constraints 0 = geq with geq != 0")
        return np.zeros(h), np.eye(h)
    zp = Vt[:r].T @ ((U[:, :r].T @ p.geq) / S[:r])
    res = np.max(np.abs(p.Feq @ zp - p.geq))
    if res > tol * max(1.0, np.max(np.abs(p.geq))):
        raise Infeasible(f"equality constraints are inconsistent (residual {res:.3e})")
    return zp, Vt[r:].T


def _phase1(F: np.ndarray, g: np.ndarray, w0: Optional[np.ndarray], tol: float):
    """Feasible point of {w : F w <= g} (interior-ish when possible)."""
    k = F.shape[1]
    if F.shape[0] == 0:
        return np.zeros(k) if w0 is None else w0
    for cand in (w0, np.zeros(k)):
        if cand is not None and np.all(F @ cand - g <= 0.0):
            return cand
    c = np.zeros(k + 1)
    c[-1] = 1.0
    A = np.hstack([F, -np.ones((F.shape[0], 1))])
    scale = max(1.0, float(np.max(np.abs(g))))
    bounds = [(None, None)] * k + [(-scale, None)]
    res = linprog(c, A_ub=A, b_ub=g, bounds=bounds, method="highs")
    if res.status != 0 or res.x is None:
        raise Infeasible(f"phase-1 LP failed: {res.message}")
    if res.x[-1] > tol * scale:
        raise Infeasible(f"inequality constraints are infeasible (max violation {res.x[-1]:.3e})")
    return res.x[:k]


def _active_set(Hr, qr, Fr, gr, w, tol, max_iter):
    """Primal active-set method on min w'Hr w + qr'w s.t. Fr w <= gr from feasible w."""
    k = Hr.shape[0]
    c = Fr.shape[0]
    row_norm = np.linalg.norm(Fr, axis=1) if c else np.zeros(0)
    work: list[int] = []
    hscale = max(1.0, float(np.max(np.abs(Hr), initial=0.0)))
    # after an unblocked full step the working-set subproblem is solved; on
    # ill-conditioned problems a recomputed step is rounding noise, not progress
    at_min = False
    for it in range(1, max_iter + 1):
        grad = 2.0 * Hr @ w + qr
        if at_min:
            step, unbounded_dir = np.zeros(k), False
            Aw = Fr[work] if work else np.zeros((0, k))
        elif work:
            Aw = Fr[work]
            Q, _ = np.linalg.qr(Aw.T, mode="complete")
            Z = Q[:, len(work):]
        else:
            Aw = np.zeros((0, k))
            Z = np.eye(k)
        if at_min:
            pass
        elif Z.shape[1] > 0:
            Hz = Z.T @ Hr @ Z
            gz = Z.T @ grad
            unbounded_dir = False
            try:
                cf = sla.cho_factor(2.0 * Hz, check_finite=False)
                dz = -sla.cho_solve(cf, gz, check_finite=False)
                # Cholesky of a nearly singular PSD matrix can succeed with garbage.
                if not np.all(np.isfinite(dz)) or np.linalg.norm(2.0 * Hz @ dz + gz) > 1e-9 * (1 + np.linalg.norm(gz)):
                    raise np.linalg.LinAlgError
            except (np.linalg.LinAlgError, ValueError):
                e, V = np.linalg.eigh(Hz)
                pos = e > 1e-12 * hscale
                cv = V.T @ gz
                zero_part = cv[~pos]
                if zero_part.size and np.max(np.abs(zero_part)) > 1e-10 * max(1.0, np.linalg.norm(grad)):
                    dz = -V[:, ~pos] @ zero_part
                    unbounded_dir = True
                else:
                    dz = -V[:, pos] @ (cv[pos] / (2.0 * e[pos]))
            step = Z @ dz
        else:
            step = np.zeros(k)
            unbounded_dir = False

        if np.linalg.norm(step) <= 1e-13 * (1.0 + np.linalg.norm(w)):
            if not work:
                return w, np.zeros(c), work, it
            lam_w, *_ = np.linalg.lstsq(Aw.T, -grad, rcond=None)
            jmin = int(np.argmin(lam_w))
            if lam_w[jmin] >= -tol:
                lam = np.zeros(c)
                lam[work] = np.maximum(lam_w, 0.0)
                return w, lam, work, it
            work.pop(jmin)
            at_min = False
            continue

        # ratio test against constraints outside the working set
        alpha = np.inf if unbounded_dir else 1.0
        block = -1
        if c:
            Fs = Fr @ step
            slack = gr - Fr @ w
            for i in range(c):
                if i in work or Fs[i] <= 1e-14 * row_norm[i] * np.linalg.norm(step):
                    continue
                a_i = max(slack[i], 0.0) / Fs[i]
                if a_i < alpha:
                    alpha, block = a_i, i
        if not np.isfinite(alpha):
            raise Unbounded("QP objective is unbounded below on the feasible set")
        w = w + alpha * step
        if block >= 0:
            work.append(block)
        else:
            at_min = not unbounded_dir
    raise MaxIterations(f"active-set QP did not converge in {max_iter} iterations")


def solve_qp(
    p: QpProblem,
    z0: Optional[np.ndarray] = None,
    tol: float = 1e-9,
    max_iter: Optional[int] = None,
) -> QpResult:
    """Solve a convex QP with a dense primal active-set method.

    Equalities are removed first via an SVD null-space basis (rank-deficient
    rows are allowed if consistent). ``z0`` is an optional warm-start hint; it
    is used only if it is feasible.
    """
    zp, Z = _eliminate_equalities(p, 1e-7)
    Hr = Z.T @ p.H @ Z
    Hr = 0.5 * (Hr + Hr.T)
    qr = Z.T @ (2.0 * p.H @ zp + p.q)
    Fr = p.F @ Z
    gr = p.g - p.F @ zp

    keep = np.linalg.norm(Fr, axis=1) > 1e-14 * max(1.0, np.max(np.abs(p.F), initial=0.0))
    if np.any(gr[~keep] < -1e-9 * max(1.0, np.max(np.abs(p.g), initial=0.0))):
        raise Infeasible("constant inequality row is violated")
    idx = np.flatnonzero(keep)
    w0 = None
    if z0 is not None and Z.shape[1] > 0:
        w0 = Z.T @ (np.asarray(z0, dtype=float) - zp)
    w = _phase1(Fr[idx], gr[idx], w0, 1e-9)
    if max_iter is None:
        max_iter = 50 * (Z.shape[1] + idx.size) + 100
    w, lam_r, work, its = _active_set(Hr, qr, Fr[idx], gr[idx], w, tol, max_iter)

    z = zp + Z @ w
    lam = np.zeros(p.F.shape[0])
    lam[idx] = lam_r
    if p.Feq.shape[0]:
        r = -(2.0 * p.H @ z + p.q + p.F.T @ lam)
        nu, *_ = np.linalg.lstsq(p.Feq.T, r, rcond=None)
    else:
        nu = np.zeros(0)
    active = np.sort(idx[work]) if work else np.zeros(0, dtype=int)
    return QpResult(
        z=z,
        lam=lam,
        nu=nu,
        active=active,
        objective=p.objective(z),
        iterations=its,
        kkt=kkt_residuals(p, z, lam, nu),
    )


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def fd_gradient(f: Callable[[np.ndarray], float], z, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with step ``h * max(1, |z_i|)``."""
    z = np.asarray(z, dtype=float).copy()
    g = np.zeros_like(z)
    for i in range(z.size):
        hi = h * max(1.0, abs(z[i]))
        zi = z[i]
        z[i] = zi + hi
        fp = f(z)
        z[i] = zi - hi
        fm = f(z)
        z[i] = zi
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"non-finite value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * hi)
    return g


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], z, h: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=float).copy()
    f0 = np.atleast_1d(np.asarray(fun(z), dtype=float))
    J = np.zeros((f0.size, z.size))
    for i in range(z.size):
        hi = h * max(1.0, abs(z[i]))
        zi = z[i]
        z[i] = zi + hi
        fp = np.atleast_1d(fun(z))
        z[i] = zi - hi
        fm = np.atleast_1d(fun(z))
        z[i] = zi
        J[:, i] = (fp - fm) / (2.0 * hi)
    if not np.all(np.isfinite(J)):
        raise NonFiniteEvaluation("non-finite Jacobian entry")
    return J


# ---------------------------------------------------------------------------
# Nonlinear programming
# ---------------------------------------------------------------------------


@dataclass
class NlpProblem:
    """``min cost(z)  s.t.  ineq(z) <= 0,  eq(z) = 0,  lb <= z <= ub``.

    ``grad``/``ineq_jac``/``eq_jac`` are optional; central differences are
    used when they are missing.
    """

    cost: Callable[[np.ndarray], float]
    z0: np.ndarray
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=float).reshape(-1).copy()


@dataclass
class NlpResult:
    z: np.ndarray
    fun: float
    status: str
    iterations: int
    kkt: float
    violation: float

    @property
    def success(self) -> bool:
        return self.status == "optimal"


def _bounds_arrays(p: NlpProblem):
    n = p.z0.size
    lb = np.full(n, -np.inf) if p.lb is None else np.broadcast_to(np.asarray(p.lb, float), (n,)).copy()
    ub = np.full(n, np.inf) if p.ub is None else np.broadcast_to(np.asarray(p.ub, float), (n,)).copy()
    return lb, ub


def _projected_gradient(z, g, lb, ub) -> float:
    zz = np.clip(z - g, lb, ub)
    return float(np.max(np.abs(zz - z), initial=0.0))


def solve_nlp(
    p: NlpProblem,
    tol: float = 1e-6,
    max_outer: int = 30,
    max_inner: int = 2000,
    strict: bool = False,
) -> NlpResult:
    """Augmented-Lagrangian outer loop over bound-constrained L-BFGS-B.

    Deterministic for fixed inputs. When the budget runs out the best iterate
    is returned with ``status='max_iterations'`` (or raised if ``strict``).
    """
    lb, ub = _bounds_arrays(p)
    z = np.clip(p.z0, lb, ub)

    def f(x):
        v = float(p.cost(x))
        if not np.isfinite(v):
            raise NonFiniteEvaluation("cost is non-finite")
        return v

    def df(x):
        if p.grad is not None:
            gv = np.asarray(p.grad(x), dtype=float)
            if not np.all(np.isfinite(gv)):
                raise NonFiniteEvaluation("gradient is non-finite")
            return gv
        return fd_gradient(f, x)

    def cin(x):
        return np.zeros(0) if p.ineq is None else np.atleast_1d(np.asarray(p.ineq(x), dtype=float))

    def ceq(x):
        return np.zeros(0) if p.eq is None else np.atleast_1d(np.asarray(p.eq(x), dtype=float))

    def jin(x):
        if p.ineq is None:
            return np.zeros((0, x.size))
        return np.asarray(p.ineq_jac(x), float) if p.ineq_jac is not None else fd_jacobian(cin, x)

    def jeq(x):
        if p.eq is None:
            return np.zeros((0, x.size))
        return np.asarray(p.eq_jac(x), float) if p.eq_jac is not None else fd_jacobian(ceq, x)

    f(z)
    ci, ce = cin(z), ceq(z)
    if not (np.all(np.isfinite(ci)) and np.all(np.isfinite(ce))):
        raise NonFiniteEvaluation("constraints are non-finite at z0")
    bounds = list(zip(np.where(np.isfinite(lb), lb, None), np.where(np.isfinite(ub), ub, None)))
    opts = {"maxiter": max_inner, "maxfun": 10 * max_inner, "gtol": 1e-12, "ftol": 1e-15, "maxcor": 20}

    if ci.size == 0 and ce.size == 0:
        res = minimize(lambda x: (f(x), df(x)), z, jac=True, method="L-BFGS-B", bounds=bounds, options=opts)
        zs = res.x
        pg = _projected_gradient(zs, df(zs), lb, ub)
        status = "optimal" if pg <= tol or res.status == 0 else "max_iterations"
        if status != "optimal" and res.status == 2:
            status = "optimal" if pg <= 1e3 * tol else "stalled"
        out = NlpResult(zs, f(zs), status, int(res.nit), pg, 0.0)
        if strict and status == "max_iterations":
            raise MaxIterations("NLP budget exhausted")
        return out

    lam = np.zeros(ci.size)
    nu = np.zeros(ce.size)
    rho = 10.0
    prev_viol = np.inf
    total_it = 0
    best = None

    def violation(x):
        a = np.maximum(cin(x), 0.0)
        b = np.abs(ceq(x))
        return float(max(np.max(a, initial=0.0), np.max(b, initial=0.0)))

    for outer in range(max_outer):

        def aug(x, lam=lam, nu=nu, rho=rho):
            ci_, ce_ = cin(x), ceq(x)
            sh = np.maximum(ci_ + lam / rho, 0.0)
            val = f(x) + 0.5 * rho * (sh @ sh) - (lam @ lam) / (2 * rho) + nu @ ce_ + 0.5 * rho * (ce_ @ ce_)
            gr = df(x)
            if ci_.size:
                gr = gr + rho * (jin(x).T @ sh)
            if ce_.size:
                gr = gr + jeq(x).T @ (nu + rho * ce_)
            return val, gr

        res = minimize(aug, z, jac=True, method="L-BFGS-B", bounds=bounds, options=opts)
        z = res.x
        total_it += int(res.nit)
        ci, ce = cin(z), ceq(z)
        viol = violation(z)
        lam = np.maximum(lam + rho * ci, 0.0)
        nu = nu + rho * ce
        gl = df(z)
        if ci.size:
            gl = gl + jin(z).T @ lam
        if ce.size:
            gl = gl + jeq(z).T @ nu
        pg = _projected_gradient(z, gl, lb, ub)
        if best is None or (viol, pg) < (best[1], best[2]):
            best = (z.copy(), viol, pg)
        if viol <= 1e-8 and pg <= tol:
            return NlpResult(z, f(z), "optimal", total_it, pg, viol)
        if viol > 0.25 * prev_viol:
            rho = min(rho * 10.0, 1e10)
        prev_viol = viol

    zb, viol, pg = best
    if strict:
        raise MaxIterations("augmented Lagrangian did not converge")
    status = "optimal" if viol <= 1e-6 and pg <= 10 * tol else "max_iterations"
    return NlpResult(zb, f(zb), status, total_it, pg, viol)


def solve_root(fun, z0, jac=None, lb=None, ub=None, xtol: float = 1e-14):
    """Least-squares root of ``fun``; returns (z, residual_norm)."""
    z0 = np.asarray(z0, dtype=float)
    kw = {}
    if lb is not None or ub is not None:
        kw["bounds"] = (
            -np.inf if lb is None else np.asarray(lb, float),
            np.inf if ub is None else np.asarray(ub, float),
        )
    res = least_squares(
        fun, z0, jac=jac if jac is not None else "3-point", xtol=xtol, ftol=1e-15, gtol=1e-15, max_nfev=2000, **kw
    )
    return res.x, float(np.linalg.norm(res.fun))


def solve_nlsq(residual, jac, z0, lb=None, ub=None, tol: float = 1e-8, max_nfev: int = 200) -> NlpResult:
    """Bounded nonlinear least squares min ||r(z)||^2 (trust-region reflective).

    ``fun`` in the result is ||r||^2 and ``kkt`` the projected-gradient norm.
    """
    z0 = np.asarray(z0, dtype=float)
    n = z0.size
    lo = np.full(n, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, float), (n,)).copy()
    hi = np.full(n, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, float), (n,)).copy()
    z0 = np.clip(z0, lo, hi)
    res = least_squares(residual, z0, jac=jac, bounds=(lo, hi), method="trf", xtol=1e-12, ftol=1e-12, gtol=tol, max_nfev=max_nfev)
    r = np.asarray(res.fun, float)
    if not np.all(np.isfinite(r)):
        raise NonFiniteEvaluation("residual is non-finite")
    g = 2.0 * np.asarray(jac(res.x), float).T @ r
    pg = _projected_gradient(res.x, g, lo, hi)
    status = "optimal" if res.status > 0 else "max_iterations"
    return NlpResult(res.x, float(r @ r), status, int(res.nfev), pg, 0.0)
