"""Run configuration: nested dataclasses addressed by flat dotted keys.

A JSON config file holds ``{"discovery.K": 16, ...}`` (nested objects are
flattened too) and ``--set key=value`` overrides individual keys.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .data import SceneConfig
from .model import ModelConfig


@dataclass(frozen=True)
class DiscoveryConfig:
    K: int = 16
    source: str = "projection"  # hidden | projection
    schedule: str = "continuous"  # continuous | discrete
    rate: float = 1e-3  # per-step discovery EMA rate for the continuous schedule
    period_epochs: int = 10  # copy period for the discrete schedule
    max_iters: int = 100
    tol: float = 1e-6


@dataclass(frozen=True)
class OptimConfig:
    # reference-scale values: LARS, base_lr 0.2, batch 4096, 1000 epochs
    kind: str = "sgd_momentum"  # sgd_momentum | lars
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1.5e-6
    batch_size: int = 8
    total_steps: int = 2000
    warmup_steps: int = 100
    alpha: float = 0.1  # contrastive temperature
    target_rate: float = 0.004  # per-step target EMA rate (BYOL base decay 0.996)
    target_schedule: str = "fixed"  # fixed | cosine


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    checkpoint_every: int = 500


@dataclass(frozen=True)
class EvalConfig:
    Ks: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128)
    source: str = "hidden"
    resolution: int = 64
    params: str = "online"  # online | target | teacher
    filter_masks: bool = False
    max_masks: int = 16
    min_area_px: float = 100.0  # at 224x224, rescaled by image area
    radius: int = 4
    top_n: int = 5
    boundary_tolerance: int = 1


@dataclass(frozen=True)
class RunConfig:
    data: SceneConfig = field(default_factory=SceneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSection = field(default_factory=RunSection)
    eval: EvalConfig = field(default_factory=EvalConfig)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


_CHOICES = {
    "discovery.source": ("hidden", "projection"),
    "discovery.schedule": ("continuous", "discrete"),
    "optim.kind": ("sgd_momentum", "lars"),
    "optim.target_schedule": ("fixed", "cosine"),
    "eval.source": ("hidden", "projection"),
    "eval.params": ("online", "target", "teacher"),
}


def flatten(obj, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = list(value) if isinstance(value, tuple) else value
    return out


def _hints(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _coerce(value, hint, key: str):
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{key}: expected a list")
        elem = args[0]
        return tuple(_coerce(v, elem, key) for v in value)
    if hint is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if hint is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        return float(value)
    if hint is str:
        return str(value)
    return value


def _build(default, flat: dict[str, object], prefix: str, problems: list[str]):
    kwargs = {}
    for name, hint in _hints(type(default)).items():
        key = f"{prefix}{name}"
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(getattr(default, name), flat, key + ".", problems)
        elif key in flat:
            try:
                kwargs[name] = _coerce(flat[key], hint, key)
            except (TypeError, ValueError) as exc:
                problems.append(str(exc) if key in str(exc) else f"{key}: {exc}")
    return dataclasses.replace(default, **kwargs)


def _flatten_json(obj: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            out.update(_flatten_json(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def build_config(values: dict[str, object] | None = None) -> RunConfig:
    """Build a RunConfig from flat (or nested) key/values, rejecting unknown keys."""
    flat = _flatten_json(values or {})
    known = flatten(RunConfig())
    problems = [f"{k}: unknown key" for k in sorted(flat) if k not in known]
    cfg = _build(RunConfig(), flat, "", problems)
    for key, choices in _CHOICES.items():
        value = flatten(cfg)[key]
        if value not in choices:
            problems.append(f"{key}: must be one of {', '.join(choices)}, got {value!r}")
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError([f"{item}: override must be key=value"])
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path is not None:
        values.update(_flatten_json(json.loads(Path(path).read_text(encoding="utf-8"))))
    values.update(parse_overrides(overrides or []))
    return build_config(values)


def to_json(cfg: RunConfig) -> str:
    return json.dumps(flatten(cfg), sort_keys=True)
