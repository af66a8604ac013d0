"""TOML configuration: network description plus analysis settings."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import tomli

from .network import Bus, Inverter, Line, NetworkError, NetworkSpec


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class AnalysisSettings:
    alpha: float = 0.1
    c: float = 1.0
    beta_max: float = 2.0
    tol: float = 0.01
    lambda_min: float = 1e-3
    q_share: float = 0.2
    state_radius: float = 2.0
    state_degree: int = 2
    lambda_degree: int = 0
    multiplier_degree: int | None = None
    taylor_order_delta: int = 1
    taylor_order_lambda: int = 1
    eps1: float = 1e-4
    eps2: float = 1e-4
    decrease_radius: float | None = None
    validation_samples: int = 200
    seed: int = 0
    mc_samples: int = 500
    horizon: float = 20.0
    dt: float = 0.01
    dwell: float = 0.5
    backend: str = "clarabel"
    alphas: list = field(default_factory=list)
    cs: list = field(default_factory=list)


_POSITIVE = {"c", "beta_max", "tol", "lambda_min", "q_share", "state_radius", "eps1", "eps2", "horizon", "dt",
             "dwell"}
_NONNEG = {"alpha"}
_INT = {"state_degree", "lambda_degree", "multiplier_degree", "taylor_order_delta", "taylor_order_lambda",
        "validation_samples", "seed", "mc_samples"}


@dataclass
class Config:
    network: NetworkSpec
    analysis: AnalysisSettings
    source: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    def fingerprint(self) -> str:
        """Stable hash of the parsed configuration."""
        blob = json.dumps({"raw": self.raw}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _num(d: dict, key: str, where: str, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{where}.{key}", "missing")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}.{key}", f"expected a finite number, got {v!r}")
    return float(v)


def _str(d: dict, key: str, where: str) -> str:
    v = d.get(key)
    if not isinstance(v, str) or not v:
        raise ConfigError(f"{where}.{key}", "expected a non-empty string")
    return v


def _check_keys(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}.{sorted(extra)[0]}", "unknown key")


def network_from_dict(raw: dict) -> NetworkSpec:
    buses, lines, invs = [], [], []
    for n, b in enumerate(raw.get("bus", [])):
        w = f"bus[{n}]"
        _check_keys(b, {"id", "v_nominal", "load_p", "load_q"}, w)
        buses.append(Bus(_str(b, "id", w), _num(b, "v_nominal", w, 1.0),
                         _num(b, "load_p", w, 0.0), _num(b, "load_q", w, 0.0)))
    if not buses:
        raise ConfigError("bus", "at least one bus is required")
    for n, ln in enumerate(raw.get("line", [])):
        w = f"line[{n}]"
        _check_keys(ln, {"from", "to", "r", "x", "G", "B"}, w)
        i, k = _str(ln, "from", w), _str(ln, "to", w)
        if "G" in ln or "B" in ln:
            if "r" in ln or "x" in ln:
                raise ConfigError(w, "give either (r, x) or (G, B), not both")
            lines.append(Line(i, k, _num(ln, "G", w, required=True), _num(ln, "B", w, required=True)))
        else:
            r, x = _num(ln, "r", w, required=True), _num(ln, "x", w, required=True)
            if r * r + x * x == 0:
                raise ConfigError(w, "zero impedance")
            z2 = r * r + x * x
            lines.append(Line(i, k, -r / z2, x / z2))
    for n, inv in enumerate(raw.get("inverter", [])):
        w = f"inverter[{n}]"
        _check_keys(inv, {"bus", "tau", "p_set", "q_set"}, w)
        invs.append(Inverter(_str(inv, "bus", w), _num(inv, "tau", w, 0.1),
                             _num(inv, "p_set", w, 0.0), _num(inv, "q_set", w, 0.0)))
    try:
        return NetworkSpec(buses, lines, invs, name=str(raw.get("name", "")))
    except NetworkError as e:
        raise ConfigError("network", str(e)) from None


def analysis_from_dict(raw: dict) -> AnalysisSettings:
    known = {f for f in AnalysisSettings.__dataclass_fields__}
    _check_keys(raw, known, "analysis")
    kw = {}
    for key, v in raw.items():
        w = f"analysis.{key}"
        if key == "backend":
            if v not in ("clarabel", "cvxopt"):
                raise ConfigError(w, "expected 'clarabel' or 'cvxopt'")
            kw[key] = v
            continue
        if key in ("alphas", "cs"):
            if not isinstance(v, list):
                raise ConfigError(w, "expected a list of numbers")
            if not v:
                raise ConfigError(w, "must not be empty")
            kw[key] = [_num({key: x}, key, "analysis") for x in v]
            if key == "alphas" and any(x < 0 for x in kw[key]):
                raise ConfigError(w, "alpha must be non-negative")
            if key == "cs" and any(x <= 0 for x in kw[key]):
                raise ConfigError(w, "c must be positive")
            continue
        if key in _INT:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(w, f"expected an integer, got {v!r}")
            if v < 0:
                raise ConfigError(w, "must be non-negative")
            kw[key] = v
            continue
        x = _num(raw, key, "analysis")
        if key in _POSITIVE and not x > 0:
            raise ConfigError(w, "must be positive")
        if key in _NONNEG and x < 0:
            raise ConfigError(w, "must be non-negative")
        kw[key] = x
    if "decrease_radius" in kw and kw["decrease_radius"] < 0:
        raise ConfigError("analysis.decrease_radius", "must be non-negative")
    s = AnalysisSettings(**kw)
    if not s.alphas:
        s.alphas = [s.alpha]
    if not s.cs:
        s.cs = [s.c]
    if s.tol >= s.beta_max:
        raise ConfigError("analysis.tol", "must be smaller than beta_max")
    if s.state_degree < 2 or s.state_degree % 2:
        raise ConfigError("analysis.state_degree", "must be even and at least 2")
    return s


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e.strerror}") from None
    return loads_config(text, source=str(path))


def loads_config(text: str, source: str = "<string>") -> Config:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError("config", f"TOML syntax error: {e}") from None
    _check_keys(raw, {"name", "bus", "line", "inverter", "analysis"}, "config")
    net = network_from_dict(raw)
    analysis = analysis_from_dict(raw.get("analysis", {}))
    return Config(net, analysis, source, raw)


def fixture_path() -> Path:
    return Path(str(resources.files("paramsos") / "data" / "fixture_5bus.toml"))


def load_fixture() -> Config:
    return load_config(fixture_path())


def settings_dict(s: AnalysisSettings) -> dict:
    return asdict(s)
