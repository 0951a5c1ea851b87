"""Plain-text key=value configuration files.

Keys are dotted: ``match.rho = 1``, ``estimator.delayed = false``,
``frontend.manhattan = true``, ``sensor.max_range = 12``,
``scenario.kind = corridor``, ``scenario.length = 40``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from typing import Optional

from .estimator import EstimatorConfig
from .frontend import FrontendConfig
from .matching import MatchConfig
from .prior_map import SensorModel
from .scan_sim import ConfigError

_SECTIONS = {"match": MatchConfig, "estimator": EstimatorConfig, "frontend": FrontendConfig,
             "sensor": SensorModel}


@dataclass
class RunConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    sensor: Optional[dict] = None  # overrides applied on top of the scan/scenario sensor
    scenario: dict = field(default_factory=dict)


def _cast(value: str, default, key: str):
    v = value.strip()
    low = v.lower()
    if isinstance(default, bool):
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if default is None or isinstance(default, float):
        if low in ("none", "null", "") and default is None:
            return None
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, int):
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    return v


def _scalar(v: str):
    """Best-effort literal for free-form scenario parameters."""
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def parse_config(text: str, path: str = "") -> RunConfig:
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{path or 'config'}:{lineno}: expected key=value")
        key, value = (p.strip() for p in s.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{path or 'config'}:{lineno}: key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        if section not in _SECTIONS and section != "scenario":
            raise ConfigError(f"{path or 'config'}:{lineno}: unknown section {section!r}")
        raw.setdefault(section, {})[name] = (value, lineno)
    return build_config(raw, path)


def build_config(raw: dict, path: str = "") -> RunConfig:
    cfg = RunConfig()
    for section, cls in _SECTIONS.items():
        entries = raw.get(section)
        if not entries:
            continue
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        kw = {}
        for name, (value, lineno) in entries.items():
            if name not in defaults:
                raise ConfigError(f"{path or 'config'}:{lineno}: unknown key {section}.{name}")
            kw[name] = _cast(value, defaults[name], f"{section}.{name}")
        if section == "sensor":
            cfg.sensor = kw
            continue
        try:
            setattr(cfg, section, replace(getattr(cfg, section), **kw))
        except ValueError as exc:
            raise ConfigError(f"{path or 'config'}: {section}: {exc}") from None
    cfg.scenario = {k: _scalar(v) for k, (v, _) in raw.get("scenario", {}).items()}
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def apply_sensor(sensor: SensorModel, overrides: Optional[dict]) -> SensorModel:
    if not overrides:
        return sensor
    try:
        return replace(sensor, **overrides)
    except ValueError as exc:
        raise ConfigError(f"sensor: {exc}") from None
