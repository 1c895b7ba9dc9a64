"""End-to-end acceptance checks on the bundled experiment configs and the property suites.

Each test records one pass/fail line that is printed in the terminal summary.
"""

import functools
import time

import numpy as np
import pytest

from ddmpc.config import bundled_configs, load_config
from ddmpc.deepc import DeepcConfig, deepc_control_step
from ddmpc.experiments import LTI4, run
from ddmpc.hankel import build_hankel, is_persistently_exciting
from ddmpc.mpc import BoxConstraints, MpcWeights, build_prediction_matrices
from ddmpc.neural import (
    RnnModel,
    SsnnModel,
    SsnnoConfig,
    nn_steady_state,
    rnn_loss,
    ssnn_loss,
    ssnn_rollout,
    ssnno_loss,
)
from ddmpc.numerics import fd_gradient, kkt_residuals, solve_qp
from ddmpc.plants import PrmsConfig, lti_simulate, prms
from ddmpc.spc import PastWindow

from conftest import ACCEPTANCE, random_stable
from test_numerics import enumerate_qp, random_feasible_qp

TOL = 0.05


@functools.lru_cache(maxsize=None)
def _run(name):
    # cached so the reactor models trained for criterion 5 are reused below
    t0 = time.perf_counter()
    res = run(load_config(bundled_configs()[name]))
    return res, time.perf_counter() - t0


def _record(k, checks: dict, detail: str):
    ok = all(checks.values())
    failed = [name for name, v in checks.items() if not v]
    ACCEPTANCE[k] = (ok, detail + ("" if ok else f"  failed: {', '.join(failed)}"))
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, failed


def _tracking(res):
    return [float(e) for e in res.summary["closed_loop"]["tracking_errors"]]


def test_criterion_1_realization():
    res, dt = _run("hokalman_paper.cfg")
    info, cl = res.summary["identification"], res.summary["closed_loop"]
    checks = {"order": info["order"] == 3, "markov": info["markov_error"] <= 1e-8,
              "x20": cl["x20_ratio"] <= 0.1, "runtime": dt < 10}
    _record(1, checks, f"s={info['order']} markov_err={info['markov_error']:.1e} "
                       f"|x20|/|x0|={cl['x20_ratio']:.4f} t={dt:.1f}s")


def test_criterion_2_spc():
    res, dt = _run("spc_paper.cfg")
    err = _tracking(res)
    resid = res.summary["identification"]["predictor_residual"]
    checks = {"tracking": max(err) <= TOL, "residual": resid <= 1e-6, "runtime": dt < 60}
    _record(2, checks, f"tracking={np.round(err, 4).tolist()} residual={resid:.1e} t={dt:.1f}s")


def _deepc_cross_oracle(probes=20):
    U = prms(PrmsConfig(seed=0), 500)
    X, Y = lti_simulate(LTI4, np.zeros(4), U)
    N, M, H = 30, 20, 200
    cfg = DeepcConfig.from_data(U, Y, N, M, H, MpcWeights(5 * np.eye(1), 0.1 * np.eye(1), N), BoxConstraints(), alpha=0.0)
    pm = build_prediction_matrices(LTI4, N)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for j in rng.choice(U.shape[1] - M - N, probes, replace=False):
        past = PastWindow.from_data(U, Y, int(j), M)
        Uf = rng.uniform(-5, 5, N)
        sol = deepc_control_step(cfg, past, np.zeros(N), U_fixed=Uf)
        truth = pm.AY @ X[:, j + M - 1] + pm.BY @ Uf
        worst = max(worst, float(np.max(np.abs(sol.Y - truth))))
    return worst


def test_criterion_3_deepc():
    res, dt = _run("deepc_paper.cfg")
    err = _tracking(res)
    gap = _deepc_cross_oracle()
    checks = {"tracking": max(err) <= TOL, "fundamental_lemma": gap <= 1e-5, "runtime": dt < 120}
    _record(3, checks, f"tracking={np.round(err, 4).tolist()} lemma_gap={gap:.1e} t={dt:.1f}s")


def test_criterion_4_pem():
    res, dt = _run("pem_paper.cfg")
    err = _tracking(res)
    val = res.summary["identification"]["validation_rmse_rel"]
    checks = {"validation": val <= 0.02, "tracking": max(err) <= TOL, "runtime": dt < 120}
    _record(4, checks, f"val_rmse/range={val:.1e} tracking={np.round(err, 4).tolist()} t={dt:.1f}s")


def test_criterion_5_neural_cstr():
    t0 = time.perf_counter()
    parts, checks = [], {}
    for name in ("rnn", "ssnn"):
        res, dt = _run(f"{name}_paper.cfg")
        err = _tracking(res)
        val = res.summary["identification"]["validation_rmse_rel"]
        checks[f"{name}_validation"] = val <= 0.05
        checks[f"{name}_tracking"] = max(err) <= TOL and res.summary["closed_loop"]["settle"] == 10
        parts.append(f"{name}: val={val:.3f} tracking={np.round(err, 3).tolist()} t={dt:.0f}s")
    total = time.perf_counter() - t0
    checks["runtime"] = total < 600
    _record(5, checks, " | ".join(parts) + f" total={total:.0f}s")


def test_reactor_ssnn_steady_state_persists():
    res, _ = _run("ssnn_paper.cfg")
    model = res.identified.model
    ss = nn_steady_state(model, [1.0])
    X, _ = ssnn_rollout(model, ss.x_r, np.tile(ss.u_r[:, None], (1, 50)))
    assert ss.residual <= 1e-6
    assert np.max(np.linalg.norm(X - ss.x_r[:, None], axis=0)) <= 1e-3


def _property_suites():
    rng = np.random.default_rng(77)
    out = {}
    # (a) QP KKT residuals and the enumeration oracle
    kkt = 0.0
    for i in range(100):
        p = random_feasible_qp(rng, int(rng.integers(2, 8)), int(rng.integers(1, 10)), int(rng.integers(0, 2)))
        r = solve_qp(p)
        kkt = max(kkt, max(kkt_residuals(p, r.z, r.lam, r.nu).values()))
    enum = 0.0
    for _ in range(20):
        p = random_feasible_qp(rng, int(rng.integers(2, 5)), int(rng.integers(1, 6)))
        z, _ = enumerate_qp(p.H, p.q, p.F, p.g)
        enum = max(enum, float(np.max(np.abs(solve_qp(p).z - z))))
    out["qp_kkt"], out["qp_enum"] = (kkt, 1e-8), (enum, 1e-6)
    # (b) prediction matrices against simulation
    pred = 0.0
    for _ in range(50):
        n, m, p_, N = (int(v) for v in rng.integers(1, 5, 4))
        model = random_stable(rng, n, m, p_)
        x0, U = rng.standard_normal(n), rng.standard_normal((m, N))
        X, Y = lti_simulate(model, x0, U)
        pm = build_prediction_matrices(model, N)
        u = U.T.reshape(-1)
        pred = max(pred, float(np.max(np.abs(pm.AX @ x0 + pm.BX @ u - X.T.reshape(-1)))),
                   float(np.max(np.abs(pm.AY @ x0 + pm.BY @ u - Y.T.reshape(-1)))))
    out["prediction"] = (pred, 1e-12)
    # (c) analytic gradients against central differences
    Ud, Yd = rng.standard_normal((1, 20)), rng.standard_normal((1, 20))
    rnn = RnnModel.init(1, 1, (5,), rng)
    ssnn = SsnnModel.init(2, 1, 1, (5,), (5,), rng)
    alpha, wx = (1.0, 0.2, 0.01, 0.01), np.array([1.0, 2.0])
    losses = {
        "rnn": (lambda t: rnn_loss(t, rnn, Ud, Yd, 5, 2), rnn.n_params),
        "ssnn": (lambda t: (lambda r: (r.total, r.grad))(ssnn_loss(t, ssnn, Ud, Yd, 5, 10.0)), ssnn.n_f + ssnn.n_h + 8),
        "ssnno": (lambda t: (lambda r: (r.total, r.grad))(ssnn_loss(t, ssnn, Ud, Yd, 5, 10.0, alpha, wx)),
                  ssnn.n_f + ssnn.n_h + 8),
    }
    grad = 0.0
    for fn, n in losses.values():
        for _ in range(10):
            th = rng.uniform(-1, 1, n)
            g = fn(th)[1]
            gf = fd_gradient(lambda t: fn(t)[0], th)
            grad = max(grad, float(np.linalg.norm(g - gf) / max(1.0, np.linalg.norm(gf))))
    out["nn_gradient"] = (grad, 1e-5)
    # (d) ordered-variance term equals the weighted sum of state variances
    cfg = SsnnoConfig(alpha=(1.0, 0.5, 0.0, 0.0), wx=(1.0, 2.0, 3.0))
    model = SsnnModel.init(3, 1, 1, (5,), (5,), rng)
    U3 = rng.standard_normal((1, 80))
    parts = ssnno_loss(model, U3, rng.standard_normal((1, 80)), cfg)
    Xs, _ = ssnn_rollout(model, model.x0, U3)
    identity = abs(0.5 * parts.variance - 0.5 * (Xs.shape[1] - 1) * float(np.sum(np.array(cfg.wx) * np.var(Xs, axis=1, ddof=1))))
    out["trace_identity"] = (identity, 1e-9)
    # (e) persistency-of-excitation monotonicity and Hankel shift structure
    bad = 0
    for _ in range(50):
        d, D = int(rng.integers(1, 3)), int(rng.integers(20, 60))
        v = rng.standard_normal((d, D)) if rng.random() < 0.7 else np.repeat(rng.standard_normal((d, D // 5 + 1)), 5, axis=1)[:, :D]
        L = int(rng.integers(1, 6))
        _, r1 = is_persistently_exciting(v, L, return_rank=True)
        ok2, r2 = is_persistently_exciting(v, L + 1, return_rank=True)
        ok1 = is_persistently_exciting(v, L)
        Nr = max(1, D // 4)
        Hk = build_hankel(v, 0, Nr, D - Nr)
        shift = np.array_equal(Hk[d:, :-1], Hk[:-d, 1:]) and np.array_equal(build_hankel(v, 1, Nr, D - Nr - 1), Hk[:, 1:])
        bad += int(r2 < r1 or (ok2 and not ok1) or not shift)
    out["pe_hankel"] = (float(bad), 0.0)
    return out


def test_criterion_6_property_suites():
    t0 = time.perf_counter()
    res = _property_suites()
    dt = time.perf_counter() - t0
    checks = {k: v <= tol for k, (v, tol) in res.items()}
    checks["runtime"] = dt < 120
    _record(6, checks, " ".join(f"{k}={v:.1e}" for k, (v, _) in res.items()) + f" t={dt:.1f}s")
