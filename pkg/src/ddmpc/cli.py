"""Command-line runner: ``ddmpc {run,validate,ident,simulate} --config FILE [--out DIR] [--seed S]``."""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import bundled_configs, load_config
from .errors import ConfigError, DdmpcError
from .modelio import dumps
from .mpc import ClosedLoopTrace

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
log = logging.getLogger("ddmpc")


def trace_csv(trace: ClosedLoopTrace) -> str:
    """Header ``k, u_*, y_*, yr_*, x_* (when available), cost, status``; 17 significant digits."""
    U, Y, R, X = trace.U, trace.Y, trace.R, trace.X
    cols = ["k"] + [f"u_{i + 1}" for i in range(U.shape[1])] + [f"y_{i + 1}" for i in range(Y.shape[1])]
    cols += [f"yr_{i + 1}" for i in range(R.shape[1])]
    if X is not None:
        cols += [f"x_{i + 1}" for i in range(X.shape[1])]
    cols += ["cost", "status"]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for k in range(trace.N_T):
        vals = [U[k], Y[k], R[k]] + ([X[k]] if X is not None else []) + [[trace.cost[k]]]
        nums = ["%.17g" % v for v in np.concatenate([np.ravel(v) for v in vals])]
        buf.write(",".join([str(k)] + nums + [trace.status[k]]) + "\n")
    return buf.getvalue()


def write_outputs(out: Path, files: dict) -> None:
    """Write every file via a temporary sibling and rename, so a failure leaves no partial file."""
    out.mkdir(parents=True, exist_ok=True)
    umask = os.umask(0)
    os.umask(umask)
    tmps = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out)
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.chmod(tmp, 0o666 & ~umask)
            tmps.append((tmp, out / name))
    except BaseException:
        for tmp, _ in tmps:
            os.unlink(tmp)
        raise
    for tmp, dest in tmps:
        os.replace(tmp, dest)


def resolve_config(arg: str) -> Path:
    """A filesystem path, or the name of a bundled config (with or without ``.cfg``)."""
    p = Path(arg)
    if p.exists():
        return p
    bundled = bundled_configs()
    for name in (arg, f"{arg}.cfg"):
        if name in bundled:
            return bundled[name]
    return p


def _summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=1, default=_jsonable, allow_nan=False) + "\n"


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _finite(d):
    """Replace non-finite floats by None so the summary is strict JSON."""
    if isinstance(d, dict):
        return {k: _finite(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_finite(v) for v in d]
    if isinstance(d, (float, np.floating)):
        return float(d) if np.isfinite(d) else None
    return d


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddmpc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "identify and run the closed loop"), ("validate", "check a config only"),
                        ("ident", "identification only"), ("simulate", "open-loop model check")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="config file or bundled config name")
        p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        if name != "validate":
            p.add_argument("--out", default="out", help="output directory (default: out)")
    sub.add_parser("list", help="list bundled configs")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "list":
        for name in sorted(bundled_configs()):
            print(name)
        return EXIT_OK
    try:
        cfg = load_config(resolve_config(args.config))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "validate":
            print(f"ok: {cfg.kind} on {cfg.system}")
            return EXIT_OK
        from . import experiments

        if args.command == "ident":
            data = experiments.make_data(cfg)
            ident = experiments.identify(cfg, data)
            summary = {"kind": cfg.kind, "system": cfg.system, "seed": cfg.seed, "identification": ident.info,
                       "runtime_s": {"identify": ident.runtime}}
            files = {"model.json": dumps(ident.record)}
        else:
            res = experiments.run(cfg) if args.command == "run" else experiments.simulate(cfg)
            ident, summary = res.identified, res.summary
            files = {"trace.csv": trace_csv(res.trace), "model.json": dumps(ident.record)}
        files["summary.json"] = _summary_json(_finite(summary))
        write_outputs(Path(args.out), files)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DdmpcError as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps(_finite(summary), default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
