"""RNN and state-space neural network models, losses, training and NMPC.

Networks are small dense tanh MLPs with an identity output layer. Gradients
are computed by hand-written backpropagation through time; everything runs
on numpy arrays with batch along the last axis.

Data conventions follow the rest of the package: ``U[:, k] = u_k`` and
``Y[:, k] = y_{k+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteState, NoSteadyStateFound
from .hankel import as_sequence
from .mpc import BoxConstraints, ControlMove, MovingHorizonEstimator, MpcWeights, greedy_inputs, solve_nmpc_tracking
from .numerics import NlpProblem, solve_nlp, solve_root

ACTIVATIONS = ("tanh", "identity")


# ---------------------------------------------------------------------------
# Layers and MLPs
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.b.size != self.W.shape[0]:
            raise DimensionMismatch("bias length must equal the layer width")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def width(self) -> int:
        return self.W.shape[0]


def layer_forward(layer: Layer, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != layer.W.shape[1]:
        raise DimensionMismatch(f"layer expects input width {layer.W.shape[1]}, got {v.shape[0]}")
    z = layer.W @ v + (layer.b if v.ndim == 1 else layer.b[:, None])
    return np.tanh(z) if layer.activation == "tanh" else z


class Mlp:
    """Composite map f = f_L o ... o f_1 with f_i(v) = sigma_i(W_i v + b_i)."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if b.W.shape[1] != a.width:
                raise DimensionMismatch("layer widths do not chain")

    @classmethod
    def init(cls, n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator, activation: str = "tanh"):
        widths = [n_in, *hidden, n_out]
        layers = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            act = "identity" if i == len(widths) - 2 else activation
            W = rng.uniform(-0.5, 0.5, (b, a)) / np.sqrt(a)
            bb = rng.uniform(-0.5, 0.5, b) / np.sqrt(a)
            layers.append(Layer(W, bb, act))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1].width

    @property
    def n_params(self) -> int:
        return sum(L.W.size + L.b.size for L in self.layers)

    def pack(self) -> np.ndarray:
        return np.concatenate([np.concatenate([L.W.ravel(), L.b]) for L in self.layers])

    def with_params(self, theta) -> "Mlp":
        theta = np.asarray(theta, dtype=float)
        out, i = [], 0
        for L in self.layers:
            nW = L.W.size
            W = theta[i:i + nW].reshape(L.W.shape)
            i += nW
            b = theta[i:i + L.b.size]
            i += L.b.size
            out.append(Layer(W.copy(), b.copy(), L.activation))
        if i != theta.size:
            raise DimensionMismatch(f"expected {i} parameters, got {theta.size}")
        return Mlp(out)

    def __call__(self, v) -> np.ndarray:
        for L in self.layers:
            v = layer_forward(L, v)
        return v

    def forward(self, V: np.ndarray):
        """Batched forward pass (V has shape (n_in, B)); returns (out, cache)."""
        cache = [V]
        for L in self.layers:
            z = L.W @ V + L.b[:, None]
            V = np.tanh(z) if L.activation == "tanh" else z
            cache.append(V)
        return V, cache

    def backward(self, cache, G: np.ndarray):
        """Given dL/d(out), return (dL/dtheta packed, dL/dV)."""
        grads = []
        for li in range(len(self.layers) - 1, -1, -1):
            L = self.layers[li]
            if L.activation == "tanh":
                G = G * (1.0 - cache[li + 1] ** 2)
            grads.append((G @ cache[li].T, G.sum(axis=1)))
            G = L.W.T @ G
        grads.reverse()
        return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads]), G

    def jacobian(self, v) -> np.ndarray:
        """d f / d v at a single point v."""
        J = np.eye(self.n_in)
        for L in self.layers:
            z = L.W @ v + L.b
            v = np.tanh(z) if L.activation == "tanh" else z
            D = (1.0 - v ** 2) if L.activation == "tanh" else np.ones_like(v)
            J = (D[:, None] * L.W) @ J
        return J

    def to_dict(self) -> list:
        return [{"W": L.W.tolist(), "b": L.b.tolist(), "activation": L.activation} for L in self.layers]

    @classmethod
    def from_dict(cls, layers: list) -> "Mlp":
        return cls([Layer(np.array(d["W"], float), np.array(d["b"], float), d["activation"]) for d in layers])


def _rollout_batch(f: Mlp, S0: np.ndarray, Ub: np.ndarray):
    """S_{t+1} = f([S_t; U_t]) for a batch; Ub has shape (m, T, B)."""
    T = Ub.shape[1]
    S = [S0]
    caches = []
    for t in range(T):
        out, cache = f.forward(np.vstack([S[-1], Ub[:, t, :]]))
        S.append(out)
        caches.append(cache)
    return np.stack(S, axis=1), caches


def _bptt(f: Mlp, caches, G: np.ndarray, d: int):
    """Back-propagate G = dL/dS[:, 1:, :] (shape (d, T, B)); returns (dtheta, dS0, dU)."""
    T = G.shape[1]
    dtheta = np.zeros(f.n_params)
    acc = np.zeros((d, G.shape[2]))
    dU = np.zeros((f.n_in - d, T, G.shape[2]))
    for t in range(T - 1, -1, -1):
        acc = acc + G[:, t, :]
        dth, dV = f.backward(caches[t], acc)
        dtheta += dth
        acc = dV[:d]
        dU[:, t, :] = dV[d:]
    return dtheta, acc, dU


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass
class RnnModel:
    """y_{k+1} = f([y_k; u_k])."""

    f: Mlp
    p: int
    m: int

    def __post_init__(self):
        if self.f.n_in != self.p + self.m or self.f.n_out != self.p:
            raise DimensionMismatch("RNN net must map p + m inputs to p outputs")

    @classmethod
    def init(cls, p: int, m: int, hidden: Sequence[int], rng: np.random.Generator) -> "RnnModel":
        return cls(Mlp.init(p + m, hidden, p, rng), p, m)

    @property
    def n_params(self) -> int:
        return self.f.n_params

    def pack(self) -> np.ndarray:
        return self.f.pack()

    def with_params(self, theta) -> "RnnModel":
        return RnnModel(self.f.with_params(theta), self.p, self.m)


@dataclass
class SsnnModel:
    """x_{k+1} = f([x_k; u_k]), y_k = h(x_k)."""

    f: Mlp
    h: Mlp
    l: int
    m: int
    p: int
    x0: np.ndarray = None

    def __post_init__(self):
        if self.f.n_in != self.l + self.m or self.f.n_out != self.l:
            raise DimensionMismatch("state net must map l + m inputs to l outputs")
        if self.h.n_in != self.l or self.h.n_out != self.p:
            raise DimensionMismatch("output net must map l inputs to p outputs")
        self.x0 = np.zeros(self.l) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(self.l)

    @classmethod
    def init(cls, l: int, m: int, p: int, hidden_f: Sequence[int], hidden_h: Sequence[int], rng) -> "SsnnModel":
        return cls(Mlp.init(l + m, hidden_f, l, rng), Mlp.init(l, hidden_h, p, rng), l, m, p)

    @property
    def n_f(self) -> int:
        return self.f.n_params

    @property
    def n_h(self) -> int:
        return self.h.n_params

    def pack(self) -> np.ndarray:
        return np.concatenate([self.f.pack(), self.h.pack(), self.x0])

    def with_params(self, theta) -> "SsnnModel":
        nf, nh = self.n_f, self.n_h
        return SsnnModel(
            self.f.with_params(theta[:nf]), self.h.with_params(theta[nf:nf + nh]), self.l, self.m, self.p,
            np.asarray(theta[nf + nh:nf + nh + self.l], float).copy(),
        )

    def step(self, x, u) -> np.ndarray:
        return self.f(np.concatenate([np.asarray(x, float).reshape(-1), np.asarray(u, float).reshape(-1)]))

    def output(self, x) -> np.ndarray:
        return self.h(np.asarray(x, float).reshape(-1))


def _check_finite(A, what="rollout"):
    if not np.all(np.isfinite(A)):
        raise NonFiniteState(f"{what} produced non-finite values")


def rnn_rollout(model: RnnModel, y_init, U) -> np.ndarray:
    """Returns (p, T+1) with column 0 = y_init and column k+1 = f(y_hat_k, U[:, k])."""
    U = as_sequence(U)
    S, _ = _rollout_batch(model.f, np.asarray(y_init, float).reshape(-1, 1), U[:, :, None])
    out = S[:, :, 0]
    _check_finite(out)
    return out


def ssnn_rollout(model: SsnnModel, x0, U):
    """States x_1..x_T and outputs h(x_1)..h(x_T) under inputs u_0..u_{T-1}."""
    U = as_sequence(U)
    S, _ = _rollout_batch(model.f, np.asarray(x0, float).reshape(-1, 1), U[:, :, None])
    X = S[:, 1:, 0]
    _check_finite(X)
    return X, model.h(X)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _windows(D: int, horizon: Optional[int], stride: Optional[int], span: int) -> list:
    """Start indices j with j + span_len <= D; ``span`` accounts for the anchor sample."""
    if horizon is None:
        return [0]
    stride = horizon if stride is None else stride
    return list(range(0, D - horizon - span + 1, stride))


def rnn_loss(theta, model: RnnModel, U, Y, horizon: Optional[int] = None, stride: Optional[int] = None):
    """Sum of squared output errors of anchored rollouts; returns (loss, grad).

    ``horizon=None`` rolls once over the whole record from the first output;
    otherwise windows of ``horizon`` steps start every ``stride`` samples,
    each anchored at the measured output.
    """
    U, Y = as_sequence(U), as_sequence(Y)
    f = model.f.with_params(theta)
    p, D = Y.shape
    T = D - 1 if horizon is None else horizon
    starts = _windows(D, horizon, stride, 1)
    js = np.array(starts)
    S0 = Y[:, js]
    idx = js[None, :] + 1 + np.arange(T)[:, None]  # (T, B)
    Ub = U[:, idx]
    Tg = Y[:, idx]
    with np.errstate(all="ignore"):
        S, caches = _rollout_batch(f, S0, Ub)
    E = S[:, 1:, :] - Tg
    if not np.all(np.isfinite(E)):
        return 1e20, np.zeros_like(theta)
    loss = float(np.sum(E * E))
    dth, _, _ = _bptt(f, caches, 2.0 * E, p)
    return loss, dth


@dataclass
class SsnnLossParts:
    total: float
    fit: float
    variance: float
    reg_f: float
    reg_h: float
    continuity: float
    variances: np.ndarray
    grad: np.ndarray
    X: np.ndarray = field(repr=False, default=None)


def ssnn_windows(D: int, horizon: Optional[int]) -> list:
    if horizon is None or horizon >= D:
        return [0]
    return list(range(0, D - horizon + 1, horizon))


def ssnn_loss(
    theta,
    model: SsnnModel,
    U,
    Y,
    horizon: Optional[int] = None,
    continuity: float = 0.0,
    alpha=(1.0, 0.0, 0.0, 0.0),
    wx=None,
) -> SsnnLossParts:
    """Composite SSNN / SSNNO loss with gradient.

    ``theta = [theta_f, theta_h, s_0, s_1, ...]`` where ``s_w`` is the initial
    state of shooting window ``w`` (``s_0 = x_0``). With ``horizon=None`` there
    is one window over the whole record (plain SSNN loss). ``alpha`` weights
    (fit, ordered variance, ||theta_f||^2, ||theta_h||^2) and ``wx`` holds
    the diagonal variance weights.
    """
    U, Y = as_sequence(U), as_sequence(Y)
    p, D = Y.shape
    l = model.l
    nf, nh = model.n_f, model.n_h
    starts = ssnn_windows(D, horizon)
    T = D if len(starts) == 1 else horizon
    B = len(starts)
    th_f, th_h = theta[:nf], theta[nf:nf + nh]
    S0 = np.asarray(theta[nf + nh:nf + nh + l * B], float).reshape(B, l).T
    f = model.f.with_params(th_f)
    h = model.h.with_params(th_h)
    js = np.array(starts)
    idx = js[None, :] + np.arange(T)[:, None]
    Ub = U[:, idx]
    with np.errstate(all="ignore"):
        S, caches = _rollout_batch(f, S0, Ub)
        Xs = S[:, 1:, :]  # (l, T, B) = x_{j+1..j+T}
        Yh, hcache = h.forward(Xs.reshape(l, -1))
    a1, a2, a3, a4 = alpha
    grad = np.zeros_like(np.asarray(theta, float))
    if not (np.all(np.isfinite(Yh)) and np.all(np.isfinite(Xs))):
        return SsnnLossParts(1e20, 1e20, 0, 0, 0, 0, np.full(l, np.nan), grad, None)
    E = Yh.reshape(p, T, B) - Y[:, idx]
    fit = float(np.sum(E * E))
    dth_h, dX = h.backward(hcache, (2.0 * a1 * E).reshape(p, -1))
    G = dX.reshape(l, T, B)

    Xflat = Xs.reshape(l, -1)
    n_s = Xflat.shape[1]
    xbar = Xflat.mean(axis=1)
    w = np.ones(l) if wx is None else np.asarray(wx, float)
    dev = Xflat - xbar[:, None]
    variances = np.sum(dev * dev, axis=1) / max(n_s - 1, 1)
    var_term = float(np.sum(w[:, None] * dev * dev))
    if a2:
        G = G + (2.0 * a2 * w[:, None] * dev).reshape(l, T, B)

    cont = 0.0
    if continuity and B > 1:
        gap = Xs[:, -1, :-1] - S0[:, 1:]
        cont = float(np.sum(gap * gap))
        G[:, -1, :-1] += 2.0 * continuity * gap
    dth_f, dS0, _ = _bptt(f, caches, G, l)
    if continuity and B > 1:
        dS0[:, 1:] -= 2.0 * continuity * gap

    reg_f = float(th_f @ th_f)
    reg_h = float(th_h @ th_h)
    grad[:nf] = dth_f + 2.0 * a3 * th_f
    grad[nf:nf + nh] = dth_h + 2.0 * a4 * th_h
    grad[nf + nh:nf + nh + l * B] = dS0.T.reshape(-1)
    total = a1 * fit + a2 * var_term + a3 * reg_f + a4 * reg_h + continuity * cont
    return SsnnLossParts(total, fit, var_term, reg_f, reg_h, cont, variances, grad, Xflat)


@dataclass(frozen=True)
class SsnnoConfig:
    alpha: tuple = (1.0, 1e-3, 0.0, 0.0)
    wx: Optional[tuple] = None
    delta: float = 1e-3

    def __post_init__(self):
        if len(self.alpha) != 4 or any(a < 0 for a in self.alpha):
            raise ValueError("alpha must be four nonnegative weights")
        if self.wx is not None:
            w = np.asarray(self.wx, float)
            if np.any(w <= 0) or np.any(np.diff(w) <= 0):
                raise ValueError("variance weights must be positive and strictly increasing")
        if not self.delta >= 0:
            raise ValueError("delta must be nonnegative")

    def weights(self, l: int) -> np.ndarray:
        return np.arange(1, l + 1, dtype=float) if self.wx is None else np.asarray(self.wx, float)


def ssnno_loss(model: SsnnModel, U, Y, cfg: SsnnoConfig, theta=None, horizon: Optional[int] = None) -> SsnnLossParts:
    """alpha1 ||Y - Y_hat||^2 + alpha2 ||W^(1/2)(X - X_bar)||^2 + alpha3 ||theta_f||^2 + alpha4 ||theta_h||^2."""
    theta = model.pack() if theta is None else theta
    return ssnn_loss(theta, model, U, Y, horizon=horizon, alpha=cfg.alpha, wx=cfg.weights(model.l))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    train_loss: float
    init_loss: float
    validation_rmse: float
    status: str
    iterations: int
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "rnn"
    hidden: tuple = (5,)
    hidden_h: tuple = (5,)
    order: int = 2
    horizon: Optional[int] = None
    stride: Optional[int] = None
    continuity: float | tuple = 10.0  # a tuple runs warm-started stages of increasing weight
    max_iter: int = 3000
    restarts: int = 1
    train_fraction: float = 0.5
    val_horizon: int = 10
    mhe_window: int = 10
    normalize: bool = True
    ssnno: Optional[SsnnoConfig] = None


def affine_fold(mlp: Mlp, mu_in, sd_in, mu_out, sd_out):
    """(A, c) such that ``A @ theta_n + c`` are the raw-coordinate parameters of a
    net whose parameters ``theta_n`` act on standardized inputs and outputs."""
    mu_in, sd_in = np.asarray(mu_in, float), np.asarray(sd_in, float)
    mu_out, sd_out = np.asarray(mu_out, float), np.asarray(sd_out, float)

    def fold(th):
        layers = list(mlp.with_params(th).layers)
        W0 = layers[0].W / sd_in[None, :]
        layers[0] = Layer(W0, layers[0].b - W0 @ mu_in, layers[0].activation)
        last = layers[-1]
        layers[-1] = Layer(sd_out[:, None] * last.W, sd_out * last.b + mu_out, last.activation)
        return Mlp(layers).pack()

    n = mlp.n_params
    c = fold(np.zeros(n))
    A = np.stack([fold(e) - c for e in np.eye(n)], axis=1)
    return A, c


def _scale(V) -> tuple:
    mu = V.mean(axis=1)
    sd = V.std(axis=1)
    return mu, np.where(sd > 0, sd, 1.0)


def _block_fold(parts, n_extra: int):
    """Block-diagonal affine map over concatenated parameter groups plus identity extras."""
    n = sum(a.shape[1] for a, _ in parts) + n_extra
    A = np.zeros((n, n))
    c = np.zeros(n)
    i = 0
    for a, ci in parts:
        k = a.shape[1]
        A[i:i + k, i:i + k] = a
        c[i:i + k] = ci
        i += k
    A[i:, i:] = np.eye(n_extra)
    return A, c


def _split(U, Y, frac):
    U, Y = as_sequence(U), as_sequence(Y)
    Dt = int(round(frac * U.shape[1]))
    return U[:, :Dt], Y[:, :Dt], Dt


def estimate_state(model: SsnnModel, U_hist, Y_hist, x_guess, prior_weight: float = 1e-3) -> np.ndarray:
    """Least-squares state at the start of a short record, then rolled to its end.

    ``U_hist`` has one fewer column than ``Y_hist`` (the inputs between the
    measured outputs). Returns the state aligned with the last output.
    """
    est = MovingHorizonEstimator(model.step, model.output, x_guess, window=Y_hist.shape[1], prior_weight=prior_weight)
    return est.update([U_hist[:, k] for k in range(U_hist.shape[1])] + [None], [Y_hist[:, k] for k in range(Y_hist.shape[1])])


def mhe_states(model: SsnnModel, U, Y, first: int, stop: int, window: int = 10, x_guess=None) -> list:
    """Moving-horizon estimates aligned with ``Y[:, j]`` for ``first <= j < stop``.

    One estimator runs over the record, so each window is seeded with the
    previous window-start estimate rolled forward one step.
    """
    U, Y = as_sequence(U), as_sequence(Y)
    w0 = max(first - window + 1, 0)
    est = MovingHorizonEstimator(model.step, model.output, model.x0 if x_guess is None else x_guess, window=window)
    us = [U[:, i + 1] for i in range(w0, stop - 1)]
    ys = [Y[:, i] for i in range(w0, stop)]
    out = []
    for j in range(first, stop):
        K = j - w0 + 1
        out.append(est.update(us[:K - 1] + [None], ys[:K]))
    return out


def multistep_rmse(model, U, Y, start: int, horizon: int, mhe_window: int = 10, x_guess=None) -> float:
    """RMSE of ``horizon``-step predictions launched at every sample from ``start``.

    RNN predictions are anchored at the measured output; SSNN predictions are
    launched from a least-squares state estimate over the preceding
    ``mhe_window`` samples.
    """
    U, Y = as_sequence(U), as_sequence(Y)
    D = Y.shape[1]
    errs = []
    # launch point j: last measured output is Y[:, j] (= y_{j+1}); predict Y[:, j+1 .. j+horizon]
    first = max(start, mhe_window) if isinstance(model, SsnnModel) else start
    js = list(range(first, D - horizon))
    if not js:
        return float("nan")
    if isinstance(model, RnnModel):
        S0 = Y[:, js]
        idx = np.array(js)[None, :] + 1 + np.arange(horizon)[:, None]
        S, _ = _rollout_batch(model.f, S0, U[:, idx])
        E = S[:, 1:, :] - Y[:, idx]
        return float(np.sqrt(np.mean(E * E)))
    for j, x in zip(js, mhe_states(model, U, Y, js[0], js[-1] + 1, mhe_window, x_guess)):
        Xp, Yp = ssnn_rollout(model, x, U[:, j + 1:j + 1 + horizon])
        errs.append(Yp - Y[:, j + 1:j + 1 + horizon])
    E = np.concatenate(errs, axis=1)
    return float(np.sqrt(np.mean(E * E)))


def train(kind: str, U, Y, cfg: TrainConfig, seed: int = 0) -> TrainResult:
    """Fit an RNN or SSNN (``kind`` in {'rnn', 'ssnn', 'ssnno'}) on the training split."""
    U, Y = as_sequence(U), as_sequence(Y)
    Ut, Yt, Dt = _split(U, Y, cfg.train_fraction)
    m, p = U.shape[0], Y.shape[0]
    rng = np.random.default_rng(seed)
    best = None
    mu_y, sd_y = _scale(Yt)
    mu_u, sd_u = _scale(Ut)
    stages = tuple(np.atleast_1d(cfg.continuity).astype(float))
    for _ in range(max(1, cfg.restarts)):
        if kind == "rnn":
            model = RnnModel.init(p, m, cfg.hidden, rng)
            th0 = model.pack()
            fold = affine_fold(model.f, np.r_[mu_y, mu_u], np.r_[sd_y, sd_u], mu_y, sd_y)

            def raw(th):
                return rnn_loss(th, model, Ut, Yt, cfg.horizon, cfg.stride)

        elif kind in ("ssnn", "ssnno"):
            model = SsnnModel.init(cfg.order, m, p, cfg.hidden, cfg.hidden_h, rng)
            B = len(ssnn_windows(Dt, cfg.horizon))
            th0 = np.concatenate([model.f.pack(), model.h.pack(), np.zeros(cfg.order * B)])
            l = cfg.order
            fold = _block_fold(
                [
                    affine_fold(model.f, np.r_[np.zeros(l), mu_u], np.r_[np.ones(l), sd_u], np.zeros(l), np.ones(l)),
                    affine_fold(model.h, np.zeros(l), np.ones(l), mu_y, sd_y),
                ],
                l * B,
            )
            alpha = (1.0, 0.0, 0.0, 0.0)
            wx = None
            if kind == "ssnno":
                sc = cfg.ssnno or SsnnoConfig()
                alpha, wx = sc.alpha, sc.weights(cfg.order)

            def raw(th, c=None):
                r = ssnn_loss(th, model, Ut, Yt, cfg.horizon, stages[-1] if c is None else c, alpha, wx)
                return r.total, r.grad

        else:
            raise ValueError(f"unknown model kind {kind!r}")
        if not cfg.normalize:
            fold = (np.eye(th0.size), np.zeros(th0.size))
        Af, cf = fold

        def fg(tn, c=None, Af=Af, cf=cf, raw=raw):
            loss, g = raw(Af @ tn + cf) if kind == "rnn" else raw(Af @ tn + cf, c)
            return loss, Af.T @ g

        init_loss = fg(th0)[0]
        if cfg.max_iter == 0:
            th, status, its = th0, "not_run", 0
        else:
            th, its = th0, 0
            for c in stages if kind != "rnn" else (None,):
                cache = {}

                def cost(z, c=c, cache=cache):
                    key = z.tobytes()
                    if cache.get("k") != key:
                        cache["k"], cache["v"] = key, fg(z, c)
                    return cache["v"][0]

                def grad(z, cost=cost, cache=cache):
                    cost(z)
                    return cache["v"][1]

                res = solve_nlp(NlpProblem(cost=cost, grad=grad, z0=th), tol=1e-8, max_inner=cfg.max_iter)
                th, status, its = res.z, res.status, its + res.iterations
            if fg(th)[0] > init_loss:
                th = th0
        loss = fg(th)[0]
        th = Af @ th + cf
        if best is None or loss < best[0]:
            best = (loss, th, init_loss, status, its, model)
    loss, th, init_loss, status, its, model = best
    if kind == "rnn":
        trained = model.with_params(th)
    else:
        n = model.n_f + model.n_h
        trained = model.with_params(th[: n + model.l])
    val = multistep_rmse(trained, U, Y, Dt, cfg.val_horizon, cfg.mhe_window) if Dt < U.shape[1] else float("nan")
    extra = {"theta": th}
    if kind != "rnn":
        sc = cfg.ssnno or SsnnoConfig()
        alpha = sc.alpha if kind == "ssnno" else (1.0, 0.0, 0.0, 0.0)
        wx = sc.weights(cfg.order) if kind == "ssnno" else None
        parts = ssnn_loss(th, model, Ut, Yt, cfg.horizon, stages[-1], alpha, wx)
        extra.update(X=parts.X, variances=parts.variances, parts=parts)
    return TrainResult(trained, float(loss), float(init_loss), val, status, its, extra)


# ---------------------------------------------------------------------------
# SSNNO truncation
# ---------------------------------------------------------------------------


@dataclass
class TruncationReport:
    s: int
    variances: np.ndarray
    kept: np.ndarray
    frozen: np.ndarray
    x_b_mean: np.ndarray
    reduced: Optional[SsnnModel]
    degenerate: bool


def ssnno_truncate(model: SsnnModel, U, Y, delta: float, x0=None, X=None) -> TruncationReport:
    """Keep states with predicted variance > delta; fold the frozen rest into biases.

    Variances come from ``X`` (an (l, D) predicted state sequence, e.g. the
    training windows) when given, else from a rollout of ``U`` from ``x0``.
    """
    if X is None:
        X, _ = ssnn_rollout(model, model.x0 if x0 is None else x0, U)
    X = np.asarray(X, float)
    D = X.shape[1]
    xbar = X.mean(axis=1)
    var = np.sum((X - xbar[:, None]) ** 2, axis=1) / max(D - 1, 1)
    kept = np.flatnonzero(var > delta)
    frozen = np.flatnonzero(~(var > delta))
    s = int(kept.size)
    if s == 0:
        return TruncationReport(0, var, kept, frozen, xbar[frozen], None, True)
    xb = xbar[frozen]
    fl = [replace(L) for L in model.f.layers]
    W1 = model.f.layers[0].W
    cols_u = np.arange(model.l, model.l + model.m)
    fl[0] = Layer(W1[:, np.concatenate([kept, cols_u])], model.f.layers[0].b + W1[:, frozen] @ xb, fl[0].activation)
    if len(fl) == 1:
        fl[0] = Layer(fl[0].W[kept], fl[0].b[kept], fl[0].activation)
    else:
        Lz = fl[-1]
        fl[-1] = Layer(Lz.W[kept], Lz.b[kept], Lz.activation)
    hl = [replace(L) for L in model.h.layers]
    H1 = model.h.layers[0].W
    hl[0] = Layer(H1[:, kept], model.h.layers[0].b + H1[:, frozen] @ xb, hl[0].activation)
    x0r = (model.x0 if x0 is None else np.asarray(x0))[kept]
    reduced = SsnnModel(Mlp(fl), Mlp(hl), s, model.m, model.p, x0r)
    return TruncationReport(s, var, kept, frozen, xb, reduced, False)


# ---------------------------------------------------------------------------
# Steady states
# ---------------------------------------------------------------------------


@dataclass
class NnSteadyState:
    u_r: np.ndarray
    x_r: Optional[np.ndarray]
    residual: float


def _input_guesses(gu, u_lb, u_ub, count: int = 7) -> list:
    out = [gu]
    if u_lb is not None and u_ub is not None:
        lo = np.broadcast_to(np.asarray(u_lb, float), gu.shape)
        hi = np.broadcast_to(np.asarray(u_ub, float), gu.shape)
        out += [np.clip(lo + t * (hi - lo), lo, hi) for t in np.linspace(0.0, 1.0, count)]
    else:
        out += [np.zeros_like(gu), gu - 1.0, gu + 1.0]
    return out


def nn_steady_state(model, y_r, guess_x=None, guess_u=None, tol: float = 1e-6, u_lb=None, u_ub=None) -> NnSteadyState:
    """RNN: y_r = f(y_r, u_r). SSNN: x_r = f(x_r, u_r), y_r = h(x_r).

    With input bounds the search is confined to them. Among the roots found,
    the one whose input is closest to ``guess_u`` is returned.
    """
    y_r = np.asarray(y_r, float).reshape(-1)
    gu = np.zeros(model.m) if guess_u is None else np.asarray(guess_u, float).reshape(-1)
    if u_lb is not None or u_ub is not None:
        gu = np.clip(gu, -np.inf if u_lb is None else u_lb, np.inf if u_ub is None else u_ub)
    roots, best = [], None

    def keep(z, r, u):
        nonlocal best
        if best is None or r < best[1]:
            best = (z, r)
        if r <= tol:
            roots.append((float(np.linalg.norm(u - gu)), z, r))

    if isinstance(model, RnnModel):
        def res(u):
            return model.f(np.concatenate([y_r, u])) - y_r

        for g in _input_guesses(gu, u_lb, u_ub):
            u, r = solve_root(res, g, lb=u_lb, ub=u_ub)
            keep(u, r, u)
        if not roots:
            raise NoSteadyStateFound(f"no input reproduces y_r (residual {best[1]:.3e})", best[1])
        _, u, r = min(roots, key=lambda t: t[0])
        return NnSteadyState(u, None, r)

    l = model.l
    gx = model.x0 if guess_x is None else np.asarray(guess_x, float).reshape(-1)
    zl = None if u_lb is None else np.concatenate([np.full(l, -np.inf), np.broadcast_to(np.asarray(u_lb, float), (model.m,))])
    zu = None if u_ub is None else np.concatenate([np.full(l, np.inf), np.broadcast_to(np.asarray(u_ub, float), (model.m,))])

    def res(z):
        x, u = z[:l], z[l:]
        return np.concatenate([model.step(x, u) - x, model.output(x) - y_r])

    for g in _input_guesses(gu, u_lb, u_ub):
        for x_start in (gx, np.zeros(l)):
            z, r = solve_root(res, np.concatenate([x_start, g]), lb=zl, ub=zu)
            keep(z, r, z[l:])
    if not roots:
        raise NoSteadyStateFound(f"no steady state with output y_r (residual {best[1]:.3e})", best[1])
    _, z, r = min(roots, key=lambda t: t[0])
    return NnSteadyState(z[l:], z[:l], r)


# ---------------------------------------------------------------------------
# NMPC predictors and controllers
# ---------------------------------------------------------------------------


def _sens_rollout(f: Mlp, s0: np.ndarray, U: np.ndarray, m: int):
    """Trajectory s_1..s_N with forward sensitivities d s / d U (stacked)."""
    d = s0.size
    N = U.size // m
    S = np.empty(d * N)
    J = np.zeros((d * N, m * N))
    s = s0
    Ss = np.zeros((d, m * N))
    for k in range(N):
        v = np.concatenate([s, U[k * m:(k + 1) * m]])
        Jf = f.jacobian(v)
        s = f(v)
        Ss = Jf[:, :d] @ Ss
        Ss[:, k * m:(k + 1) * m] += Jf[:, d:]
        S[k * d:(k + 1) * d] = s
        J[k * d:(k + 1) * d] = Ss
    return S, J


def rnn_predictor(model: RnnModel, y_now):
    y_now = np.asarray(y_now, float).reshape(-1)
    return lambda U: _sens_rollout(model.f, y_now, np.asarray(U, float), model.m)


def ssnn_state_predictor(model: SsnnModel, x_now):
    x_now = np.asarray(x_now, float).reshape(-1)
    return lambda U: _sens_rollout(model.f, x_now, np.asarray(U, float), model.m)


@dataclass
class NmpcSettings:
    max_inner: int = 200
    tol: float = 1e-8


class RnnNmpcController:
    """Output-based NMPC on an RNN predictor anchored at the measured output."""

    def __init__(self, model: RnnModel, w: MpcWeights, c: BoxConstraints, u_guess=None, settings=NmpcSettings()):
        self.model, self.w, self.c = model, w, c
        self.settings = settings
        self._refs: dict = {}
        self.u_guess = u_guess

    def u_ref(self, r):
        key = tuple(np.asarray(r, float).reshape(-1))
        if key not in self._refs:
            lb, ub = self.c.u_lb, self.c.u_ub
            self._refs[key] = nn_steady_state(self.model, r, guess_u=self.u_guess, u_lb=lb, u_ub=ub).u_r
        return self._refs[key]

    def __call__(self, ctx):
        u_r = self.u_ref(ctx.r)
        Ur = np.tile(u_r, self.w.N)
        U0 = Ur if ctx.warm is None else ctx.warm
        lb, ub = self.c.input_bounds(self.model.m, self.w.N)
        if lb is not None or ub is not None:
            U0 = np.clip(U0, -np.inf if lb is None else lb, np.inf if ub is None else ub)
        f = self.model.f
        g = greedy_inputs(lambda s, u: f(np.concatenate([s, u])), ctx.y, ctx.r, u_r, lb, ub, self.w.N, self.w.Q)
        res = solve_nmpc_tracking(rnn_predictor(self.model, ctx.y), self.w, self.c, ctx.r, Ur, U0, self.model.m,
                                  tol=self.settings.tol, max_nfev=self.settings.max_inner, extra_starts=[g])
        return ControlMove(U=res.z, cost=res.fun, status=res.status)


class SsnnNmpcController:
    """State-based NMPC on an SSNN with a moving-horizon state estimator."""

    def __init__(self, model: SsnnModel, w: MpcWeights, c: BoxConstraints, x0=None, window: int = 10,
                 u_guess=None, settings=NmpcSettings()):
        self.model, self.w, self.c = model, w, c
        self.settings = settings
        self.mhe = MovingHorizonEstimator(model.step, model.output, model.x0 if x0 is None else x0, window=window)
        self._refs: dict = {}
        self.u_guess = u_guess
        self._x_guess = None

    def refs(self, r):
        key = tuple(np.asarray(r, float).reshape(-1))
        if key not in self._refs:
            self._refs[key] = nn_steady_state(
                self.model, r, guess_x=self._x_guess, guess_u=self.u_guess, u_lb=self.c.u_lb, u_ub=self.c.u_ub
            )
        return self._refs[key]

    def __call__(self, ctx):
        x = self.mhe.update(ctx.u_hist + [None], ctx.y_hist)
        self._x_guess = x
        ss = self.refs(ctx.r)
        Ur = np.tile(ss.u_r, self.w.N)
        U0 = Ur if ctx.warm is None else ctx.warm
        lb, ub = self.c.input_bounds(self.model.m, self.w.N)
        if lb is not None or ub is not None:
            U0 = np.clip(U0, -np.inf if lb is None else lb, np.inf if ub is None else ub)
        g = greedy_inputs(self.model.step, x, ss.x_r, ss.u_r, lb, ub, self.w.N, self.w.Q)
        res = solve_nmpc_tracking(ssnn_state_predictor(self.model, x), self.w, self.c, ss.x_r, Ur, U0, self.model.m,
                                  tol=self.settings.tol, max_nfev=self.settings.max_inner, extra_starts=[g])
        return ControlMove(U=res.z, cost=res.fun, status=res.status, x_est=x.copy())
