"""INI experiment configs parsed into dataclasses, with field-path validation."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import ConfigError

KINDS = ("hokalman", "spc", "deepc", "pem", "rnn", "ssnn", "ssnno")
SYSTEMS = ("lti3", "lti4", "pem4", "cstr")


@dataclass(frozen=True)
class DataConfig:
    length: int = 1000
    use: int = 500
    prms_lo: float = -5.0
    prms_hi: float = 5.0
    prms_count: int = 11
    prms_dwell: int = 5
    prms_seed: int = 0
    impulse_samples: int = 50
    # CSTR closed-loop excitation
    gain: float = 0.8
    dither: float = 0.02
    dither_dwell: int = 1
    step: float = 0.03
    hold: int = 5
    dwell: int = 60
    lo: float = 0.4
    hi: float = 1.1
    levels: int = 8


@dataclass(frozen=True)
class IdentConfig:
    N: int = 5
    M: int = 0
    H: int = 5
    epsilon: float = 1e-6
    order: int = 4
    hidden: tuple = (5,)
    hidden_h: tuple = (5,)
    restarts: int = 3
    max_iter: int = 5000
    horizon: Optional[int] = None
    continuity: tuple = (10.0, 100.0, 1000.0)
    val_horizon: int = 1
    mhe_window: int = 10
    alpha: tuple = (1.0, 1e-3, 0.0, 0.0)
    delta: float = 1e-3


@dataclass(frozen=True)
class ControllerConfig:
    N: int = 10
    Q: tuple = (1.0,)
    R: tuple = (1.0,)
    u_lb: Optional[float] = None
    u_ub: Optional[float] = None
    u_from_data: bool = False
    u_margin: float = 0.0
    x_lb: Optional[float] = None
    x_ub: Optional[float] = None
    y_lb: Optional[float] = None
    y_ub: Optional[float] = None
    alpha: Optional[float] = None
    replay: int = 0


@dataclass(frozen=True)
class ReferenceConfig:
    values: tuple = (1.0, 0.7, 0.5, 1.0)
    length: int = 200
    settle: int = 20
    x0: Optional[tuple] = None


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    system: str
    seed: int = 0
    n_t: int = 200
    data: DataConfig = field(default_factory=DataConfig)
    ident: IdentConfig = field(default_factory=IdentConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


SECTIONS = {"data": DataConfig, "identification": IdentConfig, "controller": ControllerConfig, "reference": ReferenceConfig}
REQUIRED = {
    "hokalman": ("identification.N", "identification.H", "controller.N", "controller.Q", "controller.R", "reference.x0"),
    "spc": ("identification.N", "identification.M", "identification.H", "controller.Q", "controller.R"),
    "deepc": ("identification.N", "identification.M", "identification.H", "controller.Q", "controller.R", "controller.alpha"),
    "pem": ("identification.order", "controller.N", "controller.Q", "controller.R"),
    "rnn": ("controller.N", "controller.Q", "controller.R"),
    "ssnn": ("identification.order", "controller.N", "controller.Q", "controller.R"),
    "ssnno": ("identification.order", "controller.N", "controller.Q", "controller.R"),
}


def _parse_value(text: str, typ, path: str):
    text = text.strip()
    opt = typ.startswith("Optional[")
    base = typ[9:-1] if opt else typ
    if opt and text.lower() in ("", "none"):
        return None
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base == "tuple":
            return tuple(float(t) for t in text.replace(",", " ").split())
        if base == "str":
            return text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {base}", field=path) from None
    raise ConfigError(f"unsupported field type {typ}", field=path)


def _section(parser, name: str, cls):
    if not parser.has_section(name):
        return cls(), set()
    types = {f.name: f.type for f in fields(cls)}
    lower = {k.lower(): k for k in types}
    vals, seen = {}, set()
    for key, raw in parser.items(name):
        if key not in lower:
            raise ConfigError("unknown key", field=f"{name}.{key}")
        fname = lower[key]
        v = _parse_value(raw, str(types[fname]), f"{name}.{fname}")
        if fname in ("hidden", "hidden_h") and v is not None:
            v = tuple(int(t) for t in v)
        vals[fname] = v
        seen.add(f"{name}.{fname}")
    return cls(**vals), seen


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"unreadable config ({e.__class__.__name__})", field=source) from None
    for sec in parser.sections():
        if sec not in ("experiment", *SECTIONS):
            raise ConfigError("unknown section", field=sec)
    if not parser.has_section("experiment"):
        raise ConfigError("missing section", field="experiment")
    exp = dict(parser.items("experiment"))
    for key in exp:
        if key not in ("kind", "system", "seed", "n_t"):
            raise ConfigError("unknown key", field=f"experiment.{key}")
    for key in ("kind", "system"):
        if key not in exp:
            raise ConfigError("required", field=f"experiment.{key}")
    kind = exp["kind"].strip()
    system = exp["system"].strip()
    seed = _parse_value(exp.get("seed", "0"), "int", "experiment.seed")
    n_t = _parse_value(exp.get("n_t", "200"), "int", "experiment.n_t")
    parts, seen = {}, set()
    for name, cls in SECTIONS.items():
        parts[name], s = _section(parser, name, cls)
        seen |= s
    cfg = ExperimentConfig(kind, system, seed, n_t, parts["data"], parts["identification"], parts["controller"], parts["reference"])
    validate(cfg, seen)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config ({e.strerror})", field=str(p)) from None
    return parse_config(text, source=str(p))


def validate(cfg: ExperimentConfig, seen: Optional[set] = None) -> None:
    """Schema and consistency checks; raises ConfigError naming the offending field."""
    if cfg.kind not in KINDS:
        raise ConfigError(f"must be one of {', '.join(KINDS)}", field="experiment.kind")
    if cfg.system not in SYSTEMS:
        raise ConfigError(f"must be one of {', '.join(SYSTEMS)}", field="experiment.system")
    if seen is not None:
        for req in REQUIRED[cfg.kind]:
            if req not in seen:
                raise ConfigError(f"required for kind {cfg.kind}", field=req)
    if cfg.n_t < 1:
        raise ConfigError("must be >= 1", field="experiment.n_t")
    d, i, c, r = cfg.data, cfg.ident, cfg.controller, cfg.reference
    if d.length < 1:
        raise ConfigError("must be >= 1", field="data.length")
    if not 1 <= d.use <= d.length:
        raise ConfigError("must satisfy 1 <= use <= length", field="data.use")
    if c.N < 1:
        raise ConfigError("must be >= 1", field="controller.N")
    if any(q < 0 for q in c.Q):
        raise ConfigError("weights must be nonnegative", field="controller.Q")
    if any(v < 0 for v in c.R):
        raise ConfigError("weights must be nonnegative", field="controller.R")
    for lo, hi in (("u_lb", "u_ub"), ("x_lb", "x_ub"), ("y_lb", "y_ub")):
        a, b = getattr(c, lo), getattr(c, hi)
        if a is not None and b is not None and a > b:
            raise ConfigError(f"{lo} must not exceed {hi}", field=f"controller.{lo}")
    if r.length < 1 or not r.values:
        raise ConfigError("need at least one value and length >= 1", field="reference.values")
    if cfg.kind in ("spc", "deepc"):
        if min(i.N, i.M, i.H) < 1:
            raise ConfigError("N, M and H must be >= 1", field="identification.N")
        if i.N + i.M + i.H - 1 > d.use:
            raise ConfigError(
                f"N + M + H - 1 <= D violated ({i.N} + {i.M} + {i.H} - 1 > {d.use})", field="identification.H"
            )
        if c.N != i.N:
            raise ConfigError("controller horizon must equal identification.N", field="controller.N")
        if c.replay < i.M:
            raise ConfigError("replay must cover the past horizon M", field="controller.replay")
    if cfg.kind == "deepc" and (c.alpha is None or c.alpha < 0):
        raise ConfigError("required nonnegative regularization weight for deepc", field="controller.alpha")
    if cfg.kind == "hokalman":
        if i.N < 2 or i.H < i.N:
            raise ConfigError("need 2 <= N <= H", field="identification.N")
        if i.N + i.H - 1 > d.impulse_samples:
            raise ConfigError("N + H - 1 <= impulse_samples violated", field="data.impulse_samples")
        if r.x0 is None:
            raise ConfigError("required", field="reference.x0")
        if not i.epsilon > 0:
            raise ConfigError("must be positive", field="identification.epsilon")
    if cfg.kind in ("rnn", "ssnn", "ssnno") and cfg.system != "cstr":
        raise ConfigError("neural experiments use the cstr system", field="experiment.system")
    if cfg.kind in ("pem", "ssnn", "ssnno") and i.order < 1:
        raise ConfigError("must be >= 1", field="identification.order")
    if cfg.kind == "ssnno" and (len(i.alpha) != 4 or any(a < 0 for a in i.alpha)):
        raise ConfigError("four nonnegative weights required", field="identification.alpha")


def bundled_configs() -> dict:
    """Name -> path of the configs shipped with the package."""
    root = resources.files("ddmpc") / "configs"
    return {p.name: Path(str(p)) for p in root.iterdir() if p.name.endswith(".cfg")}
