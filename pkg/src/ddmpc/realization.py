"""Ho-Kalman-Kung realization from impulse-response (Markov parameter) data."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateHankel, InsufficientData
from .numerics import pinv, svd
from .plants import LinearModel, impulse_response


@dataclass(frozen=True)
class RealizationConfig:
    N: int = 5
    H: int = 5
    epsilon: float = 1e-6
    relative: bool = True

    def __post_init__(self):
        if self.N < 2 or self.H < 1:
            raise ValueError("need N >= 2 block rows and H >= 1 block columns")
        if self.N > self.H:
            raise ValueError("N must not exceed H")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class RealizedModel:
    model: LinearModel
    singular_values: np.ndarray
    s: int
    observability: np.ndarray
    controllability: np.ndarray


def _markov(impulse) -> np.ndarray:
    """Coerce to shape (D, p, m); a 1-D array is a SISO impulse response."""
    g = np.asarray(impulse, dtype=float)
    if g.ndim == 1:
        g = g.reshape(-1, 1, 1)
    if g.ndim != 3:
        raise ValueError("impulse response must have shape (D,) or (D, p, m)")
    return g


def markov_hankel(impulse, N: int, H: int) -> np.ndarray:
    """Block (i, j) = y_{i+j+1} = C A^{i+j} B (0-based i, j)."""
    g = _markov(impulse)
    D, p, m = g.shape
    if N + H - 1 > D:
        raise InsufficientData(f"need N + H - 1 = {N + H - 1} impulse samples, got {D}")
    out = np.empty((p * N, m * H))
    for i in range(N):
        for j in range(H):
            out[i * p:(i + 1) * p, j * m:(j + 1) * m] = g[i + j]
    return out


def ho_kalman_kung(impulse, cfg: RealizationConfig = RealizationConfig(), P: Optional[np.ndarray] = None) -> RealizedModel:
    """Realize (A_s, B_s, C_s) from Markov parameters via a rank-s SVD factorization.

    ``P`` is the free invertible factor splitting Sigma^{1/2} (identity by default).
    """
    g = _markov(impulse)
    _, p, m = g.shape
    Hk = markov_hankel(g, cfg.N, cfg.H)
    sv = svd(Hk)
    S = sv.S
    thresh = cfg.epsilon * S[0] if cfg.relative else cfg.epsilon
    s = int(np.sum(S >= thresh)) if S[0] > 0 else 0
    if s == 0:
        raise DegenerateHankel("no singular value above the threshold")
    root = np.sqrt(S[:s])
    Obs = sv.U[:, :s] * root
    Ctr = (root[:, None]) * sv.V[:, :s].T
    if P is not None:
        Obs = Obs @ P
        Ctr = np.linalg.solve(P, Ctr)
    A = pinv(Obs[: p * (cfg.N - 1)]) @ Obs[p:]
    B = Ctr[:, :m]
    C = Obs[:p]
    return RealizedModel(LinearModel(A, B, C), S, s, Obs, Ctr)


def markov_reconstruction_error(realized: RealizedModel, impulse) -> float:
    """max_k ||y_k - C A^{k-1} B|| / (||y||_inf + eps)."""
    g = _markov(impulse)
    if realized.s < 1:
        return float("nan")
    gh = impulse_response(realized.model, g.shape[0])
    scale = np.max(np.abs(g)) + np.finfo(float).eps
    return float(np.max(np.abs(gh - g)) / scale)
