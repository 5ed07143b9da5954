"""Plain-text ``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

__all__ = ["ConfigError", "RunConfig", "sigma_schedule", "parse_config", "load_config"]


class ConfigError(ValueError):
    pass


def sigma_schedule(kind: str, hi: float, lo: float, c: int) -> np.ndarray:
    """``c`` equally spaced dependencies from ``hi`` down to ``lo`` inclusive."""
    if kind != "linspace":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if c < 1:
        raise ValueError("c must be >= 1")
    if c == 1:
        return np.array([float(hi)])
    return np.linspace(hi, lo, c)


@dataclass
class RunConfig:
    model_order: int = 4
    sigma_schedule: str = "0.9"
    epochs: int = 600
    batch_size: int = 512
    learning_rate: float = 2e-2
    align_epochs: int = 5
    seed: int = 0
    n_runs: int = 10
    tr_seconds: float = 2.0
    band_lo: float = 0.01
    band_hi: float = 0.15
    ttest_variant: str = "pooled"
    fnc_order: str = "despike_first"

    def sigma(self) -> np.ndarray:
        """Resolve the schedule string into ``model_order`` dependencies."""
        text = self.sigma_schedule.strip()
        c = self.model_order
        if text.startswith("linspace:"):
            hi, lo = (float(x) for x in text[len("linspace:"):].split(","))
            return sigma_schedule("linspace", hi, lo, c)
        values = np.array([float(x) for x in text.replace(",", " ").split()])
        if values.size == 1:
            return np.full(c, values[0])
        if values.size != c:
            raise ConfigError(f"sigma_schedule has {values.size} values, model_order is {c}")
        return values

    def validate(self) -> "RunConfig":
        if self.model_order < 1:
            raise ConfigError("model_order must be >= 1")
        if self.ttest_variant not in ("pooled", "welch"):
            raise ConfigError("ttest_variant must be 'pooled' or 'welch'")
        if self.fnc_order not in ("despike_first", "filter_first"):
            raise ConfigError("fnc_order must be 'despike_first' or 'filter_first'")
        try:
            s = self.sigma()
        except ValueError as exc:
            raise ConfigError(f"sigma_schedule: {exc}") from None
        if np.any(np.abs(s) >= 1):
            raise ConfigError("sigma_schedule values must satisfy |sigma| < 1")
        return self


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CASTS[_TYPES[key]](value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
