"""Run every bundled experiment and print a one-line summary per config.

Usage: python3 scripts/reproduce.py [--out DIR] [--only NAME ...]
"""

import argparse
import contextlib
import io
import json
from pathlib import Path

from ddmpc.cli import main as cli_main
from ddmpc.config import bundled_configs


def summarize(summary: dict) -> str:
    ident, cl = summary.get("identification", {}), summary.get("closed_loop", {})
    parts = [summary["kind"]]
    for key in ("order", "markov_error", "predictor_residual", "validation_rmse_rel"):
        if key in ident:
            parts.append(f"{key}={ident[key]:.3g}")
    if "tracking_errors" in cl:
        parts.append("tracking=" + ",".join(f"{e:.3g}" for e in cl["tracking_errors"]))
    if "x20_ratio" in cl:
        parts.append(f"x20_ratio={cl['x20_ratio']:.3g}")
    parts.append(f"t={summary['runtime_s']['total']:.1f}s")
    return "  ".join(parts)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out", type=Path)
    ap.add_argument("--only", nargs="*", default=None, help="config names without the .cfg suffix")
    args = ap.parse_args(argv)
    names = sorted(n[:-4] for n in bundled_configs())
    for name in names if args.only is None else args.only:
        out = args.out / name
        with contextlib.redirect_stdout(io.StringIO()):
            code = cli_main(["run", "--config", name, "--out", str(out)])
        if code != 0:
            print(f"{name}: exit {code}")
            continue
        print(f"{name}: {summarize(json.loads((out / 'summary.json').read_text()))}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
