"""Experiment pipeline: data generation, identification, closed loop and open-loop checks."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .deepc import DeepcConfig, DeepcController, deepc_control_step
from .errors import ConfigError
from .hankel import partition_past_future
from .modelio import metadata, model_to_dict
from .mpc import BoxConstraints, ClosedLoopTrace, MpcWeights, run_receding_horizon
from .neural import (
    RnnNmpcController,
    SsnnNmpcController,
    SsnnoConfig,
    TrainConfig,
    mhe_states,
    ssnno_truncate,
    train,
)
from .pem import StateLmpcController, pem_identify, pem_rollout
from .plants import (
    CstrConfig,
    CstrExcitationConfig,
    LinearModel,
    PrmsConfig,
    ReferenceSchedule,
    cstr_excitation,
    cstr_step,
    impulse_response,
    lti_simulate,
    prms,
    prms_levels,
)
from .realization import RealizationConfig, ho_kalman_kung, markov_reconstruction_error
from .spc import PastWindow, SpcController, identify_spc, spc_predict

LTI3 = LinearModel(
    np.array([[0.2, -0.4, 0.5], [0.7, 0.3, 0.6], [-0.5, 0.1, 0.6]]),
    np.array([0.1, 0.2, 0.1]),
    np.array([[1.0, 0.0, 0.0]]),
)
LTI4 = LinearModel(
    np.array([[0.5, 0, 0.05, 0.1], [0, 0.7, 0.6, 0.4], [0.1, 0.2, 0.5, 0.1], [0.2, 0.1, -0.1, 0.1]]),
    np.array([0.5, 0.2, 0.1, 0.7]),
    np.array([[1.0, 0, 0, 0]]),
)
PEM4 = LinearModel(
    np.array([[0.5, 0, 0.05, 0.1], [0, 0.7, 0, 0.04], [0, 0, 0.55, 0.1], [0.2, 0.1, 0, 0.1]]),
    np.array([0.5, 0, 0.1, 0.7]),
    np.array([[1.0, 0, 0, 0]]),
)
LINEAR_SYSTEMS = {"lti3": LTI3, "lti4": LTI4, "pem4": PEM4}
CSTR = CstrConfig()


@dataclass
class Dataset:
    """``U[:, k] = u_k``, ``Y[:, k] = y_{k+1}``; the closed loop starts at ``x_start``."""

    U: np.ndarray
    Y: np.ndarray
    use: int
    x_start: np.ndarray
    history: Optional[tuple] = None
    impulse: Optional[np.ndarray] = None

    @property
    def train(self) -> tuple:
        return self.U[:, :self.use], self.Y[:, :self.use]


@dataclass
class Identified:
    kind: str
    model: object
    record: dict
    info: dict = field(default_factory=dict)
    runtime: float = 0.0


@dataclass
class ExperimentResult:
    identified: Identified
    trace: ClosedLoopTrace
    summary: dict


def weight_matrix(vals, dim: int, path: str) -> np.ndarray:
    """Scalar -> scalar * I; a vector of length ``dim`` -> diagonal."""
    v = np.asarray(vals, dtype=float).reshape(-1)
    if v.size == 1:
        return float(v[0]) * np.eye(dim)
    if v.size == dim:
        return np.diag(v)
    raise ConfigError(f"need 1 or {dim} weights, got {v.size}", field=path)


def schedule_for(cfg: ExperimentConfig) -> ReferenceSchedule:
    if cfg.kind == "hokalman":
        return ReferenceSchedule(((0, (0.0,)),))
    return ReferenceSchedule.quadrants(cfg.reference.values, cfg.reference.length)


def excitation_config(cfg: ExperimentConfig) -> CstrExcitationConfig:
    d = cfg.data
    return CstrExcitationConfig(gain=d.gain, dither=d.dither, dither_dwell=d.dither_dwell, step=d.step, hold=d.hold,
                                dwell=d.dwell, lo=d.lo, hi=d.hi, levels=d.levels, seed=d.prms_seed)


def make_data(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if cfg.system == "cstr":
        ec = excitation_config(cfg)
        U, Y, _ = cstr_excitation(CSTR, ec, d.length)
        x_start = cstr_excitation(CSTR, ec, d.use)[2]
        K = min(max(cfg.ident.mhe_window, 1) * 2, d.use - 1)
        hist = (U[:, d.use - K:d.use], Y[:, d.use - K - 1:d.use - 1])
        return Dataset(U, Y, d.use, x_start, hist)
    plant = LINEAR_SYSTEMS[cfg.system]
    if cfg.kind == "hokalman":
        g = impulse_response(plant, d.impulse_samples)
        U = np.zeros((plant.m, d.impulse_samples))
        U[:, 0] = 1.0
        x0 = np.asarray(cfg.reference.x0, float)
        return Dataset(U, g[:, :, 0].T, d.impulse_samples, x0, impulse=g)
    U = prms(PrmsConfig(levels=prms_levels(d.prms_lo, d.prms_hi, d.prms_count), dwell=d.prms_dwell, seed=d.prms_seed),
             d.length, plant.m)
    _, Y = lti_simulate(plant, np.zeros(plant.n), U)
    return Dataset(U, Y, d.use, np.zeros(plant.n))


def _train_config(cfg: ExperimentConfig, data: Dataset) -> TrainConfig:
    i = cfg.ident
    sc = SsnnoConfig(alpha=tuple(i.alpha), delta=i.delta) if cfg.kind == "ssnno" else None
    return TrainConfig(kind="rnn" if cfg.kind == "rnn" else cfg.kind, hidden=tuple(i.hidden), hidden_h=tuple(i.hidden_h),
                       order=i.order, horizon=i.horizon, stride=1 if cfg.kind == "rnn" else None,
                       continuity=tuple(i.continuity), max_iter=i.max_iter, restarts=i.restarts,
                       train_fraction=data.use / data.U.shape[1], val_horizon=i.val_horizon,
                       mhe_window=i.mhe_window, ssnno=sc)


def identify(cfg: ExperimentConfig, data: Optional[Dataset] = None) -> Identified:
    """Fit the model (or data matrices) the controller of ``cfg.kind`` needs."""
    data = make_data(cfg) if data is None else data
    i = cfg.ident
    Ut, Yt = data.train
    yrange = float(np.ptp(data.Y)) or 1.0
    t0 = time.perf_counter()
    info: dict = {}
    if cfg.kind == "hokalman":
        real = ho_kalman_kung(data.impulse, RealizationConfig(i.N, i.H, i.epsilon))
        info = {"order": real.s, "singular_values": real.singular_values.tolist(),
                "markov_error": markov_reconstruction_error(real, data.impulse[: i.N + i.H - 1])}
        model = real
        rec = model_to_dict("hokalman", real.model, metadata(cfg.seed, validation_error=info["markov_error"], order=real.s))
    elif cfg.kind == "spc":
        model = identify_spc(Ut, Yt, i.N, i.M, i.H)
        info = {"predictor_residual": model.residual}
        rec = model_to_dict("spc", model, metadata(cfg.seed, loss=model.residual))
    elif cfg.kind == "deepc":
        model = partition_past_future(Ut, Yt, i.N, i.M, i.H)
        rec = model_to_dict("deepc", model, metadata(cfg.seed))
    elif cfg.kind == "pem":
        fit = pem_identify(data.U, data.Y, i.order, seed=cfg.seed, train_fraction=data.use / data.U.shape[1],
                           restarts=i.restarts, max_inner=i.max_iter)
        model = fit.params
        info = {"train_loss": fit.train_loss, "validation_rmse": fit.validation_rmse,
                "validation_rmse_rel": fit.validation_rmse / yrange, "status": fit.status}
        rec = model_to_dict("pem", model, metadata(cfg.seed, fit.train_loss, fit.validation_rmse))
    else:
        res = train(cfg.kind, data.U, data.Y, _train_config(cfg, data), seed=cfg.seed)
        model = res.model
        info = {"train_loss": res.train_loss, "init_loss": res.init_loss, "validation_rmse": res.validation_rmse,
                "validation_rmse_rel": res.validation_rmse / yrange, "status": res.status, "iterations": res.iterations}
        extra = {}
        if cfg.kind == "ssnno":
            rep = ssnno_truncate(model, Ut, Yt, i.delta, X=res.extra.get("X"))
            info.update(order=rep.s, variances=rep.variances.tolist(), kept=rep.kept.tolist())
            extra = {"order": rep.s, "variances": rep.variances.tolist(), "kept": rep.kept.tolist()}
            if rep.reduced is None:
                raise ConfigError(f"no state variance exceeds delta={i.delta}", field="identification.delta")
            model = rep.reduced
        rec = model_to_dict(cfg.kind, model, metadata(cfg.seed, res.train_loss, res.validation_rmse, **extra))
    return Identified(cfg.kind, model, rec, info, time.perf_counter() - t0)


def _bounds(cfg: ExperimentConfig, data: Dataset) -> BoxConstraints:
    c = cfg.controller
    lb, ub = c.u_lb, c.u_ub
    if c.u_from_data:
        Ut, _ = data.train
        lb, ub = float(Ut.min()) - c.u_margin, float(Ut.max()) + c.u_margin
    return BoxConstraints(u_lb=lb, u_ub=ub, y_lb=c.y_lb, y_ub=c.y_ub, x_lb=c.x_lb, x_ub=c.x_ub)


def _obsv(model: LinearModel, N: int) -> np.ndarray:
    rows, CA = [], model.C
    for _ in range(N):
        rows.append(CA)
        CA = CA @ model.A
    return np.vstack(rows)


def plant_coordinates(realized, plant: LinearModel, N: int) -> LinearModel:
    """Express a realization in the plant's state basis (x_real = S x_plant, S = O_real^+ O_plant)."""
    S = np.linalg.pinv(realized.observability) @ _obsv(plant, N)
    return realized.model.transformed(S)


def build_loop(cfg: ExperimentConfig, data: Dataset, ident: Identified) -> dict:
    """Plant, controller and loop options for ``run_receding_horizon``."""
    c = cfg.controller
    bounds = _bounds(cfg, data)
    kind, model = cfg.kind, ident.model
    opts: dict = {}
    if cfg.system == "cstr":
        plant_step, plant_out, m = (lambda x, u: cstr_step(CSTR, x, u)[0]), (lambda x: x[1:2]), 1
        opts["history"] = data.history
    else:
        plant = LINEAR_SYSTEMS[cfg.system]
        plant_step, plant_out, m = (lambda x, u: plant.A @ x + plant.B @ u), (lambda x: plant.C @ x), plant.m
    u_guess = np.median(data.train[0], axis=1)
    if kind == "hokalman":
        lm = plant_coordinates(model, LINEAR_SYSTEMS[cfg.system], cfg.ident.N)
        w = MpcWeights(weight_matrix(c.Q, lm.n, "controller.Q"), weight_matrix(c.R, m, "controller.R"), c.N)
        ctrl = StateLmpcController(lm, data.x_start, w, bounds)
    elif kind in ("spc", "deepc"):
        w = MpcWeights(weight_matrix(c.Q, data.Y.shape[0], "controller.Q"), weight_matrix(c.R, m, "controller.R"), c.N)
        ctrl = SpcController(model, w, bounds) if kind == "spc" else DeepcController(DeepcConfig(model, w, bounds, c.alpha))
        opts["replay_inputs"] = data.U[:, :c.replay]
    elif kind == "pem":
        w = MpcWeights(weight_matrix(c.Q, model.l, "controller.Q"), weight_matrix(c.R, m, "controller.R"), c.N)
        ctrl = StateLmpcController(model.model(), model.x0, w, bounds)
    elif kind == "rnn":
        w = MpcWeights(weight_matrix(c.Q, model.p, "controller.Q"), weight_matrix(c.R, m, "controller.R"), c.N)
        ctrl = RnnNmpcController(model, w, bounds, u_guess=u_guess)
    else:
        q = np.asarray(c.Q, float)
        if kind == "ssnno" and q.size == cfg.ident.order:
            q = q[ident.info["kept"]]
        w = MpcWeights(weight_matrix(q, model.l, "controller.Q"), weight_matrix(c.R, m, "controller.R"), c.N)
        ctrl = SsnnNmpcController(model, w, bounds, window=cfg.ident.mhe_window, u_guess=u_guess)
    return dict(plant_step=plant_step, plant_output=plant_out, controller=ctrl, x0=data.x_start, m=m, **opts)


def closed_loop(cfg: ExperimentConfig, data: Dataset, ident: Identified) -> ClosedLoopTrace:
    loop = build_loop(cfg, data, ident)
    return run_receding_horizon(loop.pop("plant_step"), loop.pop("plant_output"), loop.pop("controller"),
                                loop.pop("x0"), schedule_for(cfg), cfg.n_t, loop.pop("m"), **loop)


def open_loop(cfg: ExperimentConfig, data: Dataset, ident: Identified) -> ClosedLoopTrace:
    """Model predictions against measured data; ``R`` holds the measurement.

    Linear state-space models are rolled out freely; SPC, DeePC and the neural
    models give one-step-ahead predictions from the measured past.
    """
    kind, model = cfg.kind, ident.model
    U, Y = data.U, data.Y
    D = U.shape[1]
    rows_u, rows_y, rows_r = [], [], []
    if kind == "hokalman":
        gh = impulse_response(model.model, D)[:, :, 0]
        rows_u, rows_y, rows_r = list(U.T), list(gh), list(Y.T)
    elif kind == "pem":
        Yh = pem_rollout(model, U)
        rows_u, rows_y, rows_r = list(U.T), list(Yh.T), list(Y.T)
    elif kind in ("spc", "deepc"):
        N, M = model.N, model.M
        dc = None
        if kind == "deepc":
            c = cfg.controller
            w = MpcWeights(weight_matrix(c.Q, Y.shape[0], "controller.Q"), weight_matrix(c.R, U.shape[0], "controller.R"), N)
            dc = DeepcConfig(model, w, _bounds(cfg, data), c.alpha)
        for j in range(max(data.use - M, 0), D - M - N + 1):
            k = j + M
            past = PastWindow.from_data(U, Y, j, M)
            Uf = U[:, k:k + N].T.reshape(-1)
            Yh = spc_predict(model, past, Uf) if dc is None else deepc_control_step(dc, past, Y[:, k], U_fixed=Uf).Y
            rows_u.append(U[:, k])
            rows_y.append(Yh[:Y.shape[0]])
            rows_r.append(Y[:, k])
    elif kind == "rnn":
        for k in range(1, D):
            rows_u.append(U[:, k])
            rows_y.append(model.f(np.concatenate([Y[:, k - 1], U[:, k]])))
            rows_r.append(Y[:, k])
    else:
        w = cfg.ident.mhe_window
        for k, x in zip(range(w, D), mhe_states(model, U, Y, w - 1, D - 1, w)):
            rows_u.append(U[:, k])
            rows_y.append(model.output(model.step(x, U[:, k])))
            rows_r.append(Y[:, k])
    n = len(rows_u)
    return ClosedLoopTrace(U=np.array(rows_u).reshape(n, -1), Y=np.array(rows_y).reshape(n, -1),
                           R=np.array(rows_r).reshape(n, -1), X=None, cost=np.full(n, np.nan),
                           status=["open_loop"] * n)


def trace_summary(cfg: ExperimentConfig, trace: ClosedLoopTrace) -> dict:
    out = {"n_t": trace.N_T, "status_counts": dict(Counter(trace.status)), "solve_time_s": trace.solve_time}
    if cfg.kind == "hokalman":
        X = trace.X
        x0 = np.max(np.abs(X[0]))
        k = min(20, trace.N_T)
        xk = trace.extra["x_final"] if k == trace.N_T else X[k]
        out.update(x20_ratio=float(np.max(np.abs(xk)) / x0), max_abs_u=float(np.max(np.abs(trace.U))),
                   max_abs_x=float(np.max(np.abs(X))))
    else:
        sch = schedule_for(cfg)
        out.update(settle=cfg.reference.settle, tracking_errors=trace.tracking_errors(sch, cfg.reference.settle))
    return out


def run(cfg: ExperimentConfig) -> ExperimentResult:
    t0 = time.perf_counter()
    data = make_data(cfg)
    ident = identify(cfg, data)
    trace = closed_loop(cfg, data, ident)
    summary = {"kind": cfg.kind, "system": cfg.system, "seed": cfg.seed, "identification": ident.info,
               "closed_loop": trace_summary(cfg, trace),
               "runtime_s": {"identify": ident.runtime, "total": time.perf_counter() - t0}}
    return ExperimentResult(ident, trace, summary)


def simulate(cfg: ExperimentConfig) -> ExperimentResult:
    t0 = time.perf_counter()
    data = make_data(cfg)
    ident = identify(cfg, data)
    trace = open_loop(cfg, data, ident)
    err = trace.Y - trace.R
    rng = float(np.ptp(data.Y)) or 1.0
    summary = {"kind": cfg.kind, "system": cfg.system, "seed": cfg.seed, "identification": ident.info,
               "open_loop": {"samples": trace.N_T, "rmse": float(np.sqrt(np.mean(err ** 2))),
                             "rmse_rel": float(np.sqrt(np.mean(err ** 2)) / rng)},
               "runtime_s": {"identify": ident.runtime, "total": time.perf_counter() - t0}}
    return ExperimentResult(ident, trace, summary)
