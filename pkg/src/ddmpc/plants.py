"""Ground-truth plants, excitation signals and reference schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidMatrix, NonFiniteState
from .hankel import as_sequence


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        C = np.asarray(self.C, dtype=float)
        n = A.shape[0]
        B = B.reshape(n, -1)
        C = C.reshape(-1, n)
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        for name, M in (("A", A), ("B", B), ("C", C)):
            if not np.all(np.isfinite(M)):
                raise InvalidMatrix(f"{name} has non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def transformed(self, T: np.ndarray) -> "LinearModel":
        """Similar model in coordinates x' = T^{-1} x."""
        Ti = np.linalg.inv(T)
        return LinearModel(Ti @ self.A @ T, Ti @ self.B, self.C @ T)


def lti_step(model: LinearModel, x, u):
    """One step: returns (A x + B u, C x)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.size != model.n or u.size != model.m:
        raise DimensionMismatch(f"expected x in R^{model.n}, u in R^{model.m}; got {x.size}, {u.size}")
    return model.A @ x + model.B @ u, model.C @ x


def lti_simulate(model: LinearModel, x0, U):
    """Roll out from ``x0`` under inputs ``U`` (m, D).

    Returns ``(X, Y)`` with ``X[:, k] = x_{k+1}`` and ``Y[:, k] = y_{k+1} = C x_{k+1}``,
    i.e. the D outputs that follow the D inputs.
    """
    U = as_sequence(U)
    if U.shape[0] != model.m:
        raise DimensionMismatch(f"U must have {model.m} rows")
    D = U.shape[1]
    X = np.empty((model.n, D))
    x = np.asarray(x0, dtype=float).reshape(-1)
    for k in range(D):
        x = model.A @ x + model.B @ U[:, k]
        X[:, k] = x
    return X, model.C @ X


def impulse_response(model: LinearModel, D: int) -> np.ndarray:
    """Markov parameters as an array of shape (D, p, m): out[k-1] = C A^{k-1} B."""
    out = np.empty((D, model.p, model.m))
    AkB = model.B.copy()
    for k in range(D):
        out[k] = model.C @ AkB
        AkB = model.A @ AkB
    return out


def dc_gain(model: LinearModel) -> np.ndarray:
    return model.C @ np.linalg.solve(np.eye(model.n) - model.A, model.B)


# ---------------------------------------------------------------------------
# CSTR
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CstrConfig:
    B_const: float = 22.0
    Da: float = 0.082
    Db: float = 3.0
    T: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


def cstr_step(cfg: CstrConfig, x, u, rng: Optional[np.random.Generator] = None):
    """Euler-discretized CSTR; returns (x_{k+1}, y_k) with y_k = x2_k + noise."""
    x1, x2 = (float(v) for v in np.asarray(x, dtype=float).reshape(2))
    u = float(np.asarray(u, dtype=float).reshape(-1)[0])
    with np.errstate(over="ignore", invalid="ignore"):
        r = cfg.Da * (1.0 - x1) * np.exp(x2)
    x1n = x1 + cfg.T * (-x1 + r)
    x2n = x2 + cfg.T * (x2 + cfg.B_const * r - cfg.Db * (x2 - u))
    if not (np.isfinite(x1n) and np.isfinite(x2n)) or max(abs(x1n), abs(x2n)) > 1e6:
        raise NonFiniteState(f"CSTR state diverged at x=({x1}, {x2}), u={u}")
    y = x2
    if cfg.noise_std > 0:
        if rng is None:
            raise ValueError("rng required when noise_std > 0")
        y = y + cfg.noise_std * rng.standard_normal()
    return np.array([x1n, x2n]), np.array([y])


def cstr_steady_input(cfg: CstrConfig, y_r: float):
    """Steady state (x, u) of the CSTR with output y_r (closed form)."""
    x2 = float(y_r)
    e = cfg.Da * np.exp(x2)
    x1 = e / (1.0 + e)
    r = cfg.Da * (1.0 - x1) * np.exp(x2)
    u = x2 - (x2 + cfg.B_const * r) / cfg.Db
    return np.array([x1, x2]), np.array([u])


# ---------------------------------------------------------------------------
# Excitation and references
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrmsConfig:
    levels: tuple = tuple(np.linspace(-5.0, 5.0, 11))
    dwell: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.dwell < 1:
            raise ValueError("dwell must be >= 1")
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))


def prms_levels(lo: float, hi: float, count: int = 11) -> tuple:
    return tuple(np.linspace(lo, hi, count))


def prms(cfg: PrmsConfig, length: int, m: int = 1) -> np.ndarray:
    """Pseudorandom multilevel sequence of shape (m, length)."""
    rng = np.random.default_rng(cfg.seed)
    nblocks = -(-length // cfg.dwell)
    levels = np.asarray(cfg.levels)
    draws = levels[rng.integers(0, levels.size, size=(m, nblocks))]
    return np.repeat(draws, cfg.dwell, axis=1)[:, :length]


@dataclass(frozen=True)
class ReferenceSchedule:
    breakpoints: tuple = field(default_factory=lambda: ((0, (1.0,)),))

    def __post_init__(self):
        bps = tuple((int(k), tuple(np.atleast_1d(np.asarray(r, dtype=float)))) for k, r in self.breakpoints)
        ks = [k for k, _ in bps]
        if not ks or ks[0] != 0 or any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("breakpoints must start at 0 and be strictly increasing")
        object.__setattr__(self, "breakpoints", bps)

    @classmethod
    def quadrants(cls, values: Sequence[float], length: int) -> "ReferenceSchedule":
        """Equal-length segments over ``length`` instants."""
        seg = length // len(values)
        return cls(tuple((i * seg, (v,)) for i, v in enumerate(values)))

    def segments(self, N_T: int):
        """(start, stop) instant ranges for each breakpoint within [0, N_T)."""
        ks = [k for k, _ in self.breakpoints] + [N_T]
        return [(a, min(b, N_T)) for a, b in zip(ks, ks[1:]) if a < N_T]


def reference_at(schedule: ReferenceSchedule, k: int) -> np.ndarray:
    val = schedule.breakpoints[0][1]
    for start, r in schedule.breakpoints:
        if start <= k:
            val = r
        else:
            break
    return np.asarray(val, dtype=float)


REFERENCE_QUADRANTS = (1.0, 0.7, 0.5, 1.0)


@dataclass(frozen=True)
class CstrExcitationConfig:
    """Staircase setpoint sweep under proportional feedback plus a PRMS dither.

    The CSTR is open-loop unstable at the operating points of interest, so
    training data is collected with ``u = u_ss(s_k) - K (y_k - s_k) + d_k``.
    Every ``hold`` samples the setpoint ``s_k`` steps by at most ``step``
    toward its current target; targets are shuffled passes over a grid of
    ``levels`` values in [lo, hi], switched every ``dwell`` samples. The plant
    starts at the steady state of the first setpoint unless ``x0`` is given.
    """

    gain: float = 0.8
    dither: float = 0.02
    dither_dwell: int = 1
    step: float = 0.03
    hold: int = 5
    dwell: int = 60
    lo: float = 0.4
    hi: float = 1.1
    levels: int = 8
    seed: int = 0


def setpoint_sweep(cfg: CstrExcitationConfig, length: int) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    grid = np.linspace(cfg.lo, cfg.hi, cfg.levels)
    targets: list = []
    while len(targets) * cfg.dwell < length + cfg.dwell:
        targets.extend(rng.permutation(grid))
    s = np.empty(length)
    v = float(targets[0])
    for k in range(length):
        if k % cfg.hold == 0:
            v += float(np.clip(targets[k // cfg.dwell + 1] - v, -cfg.step, cfg.step))
        s[k] = v
    return s


def cstr_excitation(plant: CstrConfig, cfg: CstrExcitationConfig, length: int, x0=None):
    """Returns (U, Y, x_end) with ``U[:, k] = u_k``, ``Y[:, k] = y_{k+1}`` and the final state."""
    s = setpoint_sweep(cfg, length)
    d = prms(PrmsConfig(levels=prms_levels(-cfg.dither, cfg.dither, 5), dwell=cfg.dither_dwell, seed=cfg.seed + 1), length)[0]
    x = cstr_steady_input(plant, s[0])[0] if x0 is None else np.asarray(x0, float).reshape(2)
    U = np.empty((1, length))
    Y = np.empty((1, length))
    for k in range(length):
        u = cstr_steady_input(plant, s[k])[1][0] - cfg.gain * (x[1] - s[k]) + d[k]
        x, _ = cstr_step(plant, x, u)
        U[0, k] = u
        Y[0, k] = x[1]
    return U, Y, x
