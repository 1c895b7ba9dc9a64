"""JSON model files: {kind, dims, matrices or layers, metadata}."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .hankel import HankelBlocks
from .neural import Mlp, RnnModel, SsnnModel
from .pem import PemParams
from .plants import LinearModel
from .spc import SpcPredictor

LINEAR_KINDS = ("hokalman", "pem", "linear")


def _num(v):
    """JSON has no NaN/inf; store them as null."""
    v = float(v)
    return v if math.isfinite(v) else None


def _mat(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def metadata(seed=None, loss=None, validation_error=None, **extra) -> dict:
    out = {
        "seed": None if seed is None else int(seed),
        "loss": None if loss is None else _num(loss),
        "validation_error": None if validation_error is None else _num(validation_error),
    }
    out.update(extra)
    return out


def model_to_dict(kind: str, model, meta: dict | None = None) -> dict:
    """Serialize a LinearModel, PemParams, SpcPredictor, HankelBlocks (DeePC), RnnModel or SsnnModel."""
    meta = metadata() if meta is None else meta
    if isinstance(model, PemParams):
        d = {"dims": {"n": model.l, "m": model.m, "p": model.p},
             "matrices": {"A": _mat(model.A), "B": _mat(model.B), "C": _mat(model.C), "x0": _mat(model.x0)}}
    elif isinstance(model, LinearModel):
        d = {"dims": {"n": model.n, "m": model.m, "p": model.p},
             "matrices": {"A": _mat(model.A), "B": _mat(model.B), "C": _mat(model.C)}}
    elif isinstance(model, SpcPredictor):
        d = {"dims": {"m": model.m, "p": model.p, "N": model.N, "M": model.M},
             "matrices": {"P1": _mat(model.P1), "P2": _mat(model.P2), "BY": _mat(model.BY)}}
    elif isinstance(model, HankelBlocks):
        d = {"dims": {"m": model.m, "p": model.p, "N": model.N, "M": model.M, "H": model.H},
             "matrices": {"Up": _mat(model.Up), "Yp": _mat(model.Yp), "Uf": _mat(model.Uf), "Yf": _mat(model.Yf)}}
    elif isinstance(model, RnnModel):
        d = {"dims": {"m": model.m, "p": model.p}, "layers": model.f.to_dict()}
    elif isinstance(model, SsnnModel):
        d = {"dims": {"l": model.l, "m": model.m, "p": model.p},
             "layers": {"f": model.f.to_dict(), "h": model.h.to_dict()},
             "matrices": {"x0": _mat(model.x0)}}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return {"kind": kind, **d, "metadata": meta}


def model_from_dict(d: dict):
    """Inverse of ``model_to_dict``; returns the model object."""
    try:
        kind, dims = d["kind"], d["dims"]
        mats = d.get("matrices", {})
        if kind in LINEAR_KINDS:
            A, B, C = (np.array(mats[k], float) for k in ("A", "B", "C"))
            if "x0" in mats:
                return PemParams(A, B, C, np.array(mats["x0"], float))
            return LinearModel(A, B, C)
        if kind == "spc":
            return SpcPredictor(np.array(mats["P1"], float), np.array(mats["P2"], float),
                                np.array(mats["BY"], float), int(dims["N"]), int(dims["M"]))
        if kind == "deepc":
            return HankelBlocks(*(np.array(mats[k], float) for k in ("Up", "Yp", "Uf", "Yf")),
                                N=int(dims["N"]), M=int(dims["M"]), H=int(dims["H"]))
        if kind == "rnn":
            return RnnModel(Mlp.from_dict(d["layers"]), int(dims["p"]), int(dims["m"]))
        if kind in ("ssnn", "ssnno"):
            return SsnnModel(Mlp.from_dict(d["layers"]["f"]), Mlp.from_dict(d["layers"]["h"]),
                             int(dims["l"]), int(dims["m"]), int(dims["p"]), np.array(mats["x0"], float))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed model file ({e})", field="model") from e
    raise ConfigError(f"unknown model kind {kind!r}", field="model.kind")


def dumps(d: dict) -> str:
    return json.dumps(d, indent=1, sort_keys=False, allow_nan=False) + "\n"


def save_model(path, d: dict) -> None:
    Path(path).write_text(dumps(d))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
