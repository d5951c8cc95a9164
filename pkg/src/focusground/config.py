"""Pipeline configuration: a YAML file plus long-flag overrides of the same names."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .episode import EpisodeConfig
from .oracle import OracleKnobs
from .policy import Decoding, EndpointConfig
from .simenv import SimConfig
from .geometry import ImageSize


class ConfigError(ValueError):
    pass


@dataclass
class SimSettings:
    n: int = 100
    rows: int = 8
    cols: int = 12
    width: int = 1920
    height: int = 1080
    icon_ratio: float = 0.3

    def to_config(self) -> SimConfig:
        return SimConfig(rows=self.rows, cols=self.cols, screen=ImageSize(self.width, self.height), icon_ratio=self.icon_ratio)


@dataclass
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    policy: str = "oracle"
    max_steps: int = 2
    min_pixels: int = 3136
    max_pixels: int = 2_408_448
    allow_early_click: bool = True
    synthesis_temperature: float = 1.0
    eval_temperature: float = 0.0
    max_tokens: int = 512
    rollouts_per_sample: int = 4
    max_keep_per_sample: int = 1
    n_candidates: int = 6
    pairs_per_sample: int = 2
    N: int = 8
    delta: int = 4
    tau: float = 0.8
    beta: float = 0.1
    multistep_max_crops: int = 2
    multistep_rollouts: int = 4
    mix_one_step: bool = True
    multistep_dpo: bool = False
    probe_factors: list[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0, math.inf])
    probe_trials: int = 1000
    progress_every: int = 100
    crop_prompt: Optional[str] = None
    click_prompt: Optional[str] = None
    oracle: OracleKnobs = field(default_factory=OracleKnobs)
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    sim: SimSettings = field(default_factory=SimSettings)

    def validate(self) -> "PipelineConfig":
        problems = []
        if self.policy not in ("oracle", "remote"):
            problems.append(f"policy must be 'oracle' or 'remote', got {self.policy!r}")
        if self.max_steps < 1:
            problems.append("max_steps must be >= 1")
        if not 0 < self.min_pixels <= self.max_pixels:
            problems.append(f"need 0 < min_pixels <= max_pixels (got {self.min_pixels}, {self.max_pixels})")
        if self.N < 1:
            problems.append("N must be >= 1")
        if not 1 <= self.delta <= self.N:
            problems.append(f"delta={self.delta} must lie in [1, N={self.N}]")
        if not 0 < self.tau <= 1:
            problems.append(f"tau={self.tau} must lie in (0, 1]")
        if self.beta <= 0:
            problems.append("beta must be positive")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.multistep_max_crops < 2:
            problems.append("multistep_max_crops must be >= 2")
        for name in ("rollouts_per_sample", "max_keep_per_sample", "n_candidates", "pairs_per_sample",
                     "multistep_rollouts", "probe_trials"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if any(f <= 0 for f in self.probe_factors) or self.probe_factors != sorted(self.probe_factors):
            problems.append("probe_factors must be positive and ascending")
        if not 0 <= self.oracle.miss_rate <= 1:
            problems.append("oracle.miss_rate must be in [0, 1]")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def episode(self, *, synthesis: bool = False, **overrides) -> EpisodeConfig:
        temp = self.synthesis_temperature if synthesis else self.eval_temperature
        kw = dict(
            max_steps=self.max_steps,
            min_pixels=self.min_pixels,
            max_pixels=self.max_pixels,
            decoding=Decoding(temperature=temp, max_tokens=self.max_tokens),
            allow_early_click=self.allow_early_click,
            seed=self.seed,
        )
        kw.update(overrides)
        return EpisodeConfig(**kw)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            if isinstance(v, list):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return clean(dataclasses.asdict(self))


# -- loading and overrides ---------------------------------------------------

_NESTED = {"oracle": OracleKnobs, "endpoint": EndpointConfig, "sim": SimSettings}


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _base_type(tp):
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _base_type(args[0]), True
    return tp, False


def _coerce(value, tp, name: str):
    base, optional = _base_type(tp)
    if value is None or (optional and isinstance(value, str) and value.lower() in ("none", "null", "")):
        if optional:
            return None
        raise ConfigError(f"{name} may not be empty")
    try:
        if typing.get_origin(base) is list:
            (item,) = typing.get_args(base)
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return [_coerce(v, item, name) for v in value]
        if base is bool:
            if isinstance(value, bool):
                return value
            s = str(value).lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if base is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, str):
                value = value.replace("_", "")
            return int(value)
        if base is float:
            return float(value)
        if base is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {name}: {value!r}") from exc
    return value


def _apply(obj, data: dict, prefix: str = ""):
    hints = _hints(type(obj))
    for key, value in data.items():
        key = key.replace("-", "_")
        if key not in hints:
            raise ConfigError(f"unknown config field {prefix}{key}")
        if key in _NESTED and isinstance(getattr(obj, key), _NESTED[key]):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a mapping")
            _apply(getattr(obj, key), value, f"{prefix}{key}.")
        else:
            setattr(obj, key, _coerce(value, hints[key], prefix + key))


def override_fields() -> list[tuple[str, Any]]:
    """Dotted field names (``delta``, ``oracle.miss_rate``...) with their types."""
    out = []
    for name, tp in _hints(PipelineConfig).items():
        if name in _NESTED:
            out.extend((f"{name}.{sub}", t) for sub, t in _hints(_NESTED[name]).items())
        else:
            out.append((name, tp))
    return out


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict[str, Any]] = None) -> PipelineConfig:
    """Read the YAML file (if any), apply dotted overrides, validate."""
    cfg = PipelineConfig()
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        _apply(cfg, data)
    for dotted, value in (overrides or {}).items():
        *parents, leaf = dotted.split(".")
        nested: dict = {leaf: value}
        for p in reversed(parents):
            nested = {p: nested}
        _apply(cfg, nested)
    return cfg.validate()
