"""Experiment configuration: JSON schema with field-path errors and flat
key=value overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..baselines import MamlConfig, PseudoConfig
from ..gmtrain import GmConfig
from ..world import WorldConfig

METHODS = ("gm", "maml", "pseudo", "supervised")


class ConfigError(ValueError):
    """Raised with a dotted field path identifying the offending entry."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class LabeledSpec:
    n: int = 10
    mode: str = "real"
    seed: int = 101

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError("labeled.n", "must be >= 1")
        if self.mode not in ("real", "synthetic", "ood"):
            raise ConfigError("labeled.mode", f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class DownstreamSpec:
    enabled: bool = False
    arch: str = "unet-s"
    steps: int = 1200
    dataset_size: int = 96
    batch_size: int = 2
    lr: float = 0.001
    momentum: float = 0.9


@dataclass(frozen=True)
class EvalSpec:
    test_size: int = 48
    include_background: bool = False
    downstream: DownstreamSpec = field(default_factory=DownstreamSpec)


@dataclass(frozen=True)
class SupervisedSpec:
    steps: int = 1500
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 2
    eval_interval: int = 150


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "gm"
    seed: int = 0
    out_dir: str | None = None
    world: WorldConfig = field(default_factory=WorldConfig)
    labeled: LabeledSpec = field(default_factory=LabeledSpec)
    gm: GmConfig = field(default_factory=GmConfig)
    maml: MamlConfig = field(default_factory=MamlConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    supervised: SupervisedSpec = field(default_factory=SupervisedSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    segmentor_arch: str = "unet-s"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}")

    def to_dict(self) -> dict:
        return _asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _asdict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    return obj


_SECTIONS: dict[str, type] = {
    "world": WorldConfig,
    "labeled": LabeledSpec,
    "gm": GmConfig,
    "maml": MamlConfig,
    "pseudo": PseudoConfig,
    "supervised": SupervisedSpec,
    "eval": EvalSpec,
}


def _coerce(value: Any, target_type: Any, path: str) -> Any:
    """Best-effort coercion of JSON values into dataclass field types."""
    import typing

    origin = typing.get_origin(target_type)
    if origin is typing.Union:
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if target_type in (int, float, bool, str):
        if target_type is float and isinstance(value, int):
            value = float(value)
        if target_type is int and isinstance(value, bool):
            raise ConfigError(path, "expected an integer, got a boolean")
        if not isinstance(value, target_type):
            raise ConfigError(path, f"expected {target_type.__name__}, got {type(value).__name__}")
        return value
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        args = typing.get_args(target_type)
        elem = args[0] if args else Any
        return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
    return value


# dataclass field annotations are strings under `from __future__ import
# annotations`; resolve them once per section class
import typing as _typing

_ANNOT: dict[type, dict[str, Any]] = {}
for _cls in list(_SECTIONS.values()) + [DownstreamSpec, EvalSpec, SupervisedSpec]:
    _ANNOT[_cls] = _typing.get_type_hints(_cls)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("", "top-level config must be a JSON object")
    known = {"method", "seed", "out_dir", "segmentor_arch"} | set(_SECTIONS)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    kwargs: dict[str, Any] = {}
    for key in ("method", "segmentor_arch"):
        if key in data:
            kwargs[key] = _coerce(data[key], str, key)
    if "seed" in data:
        kwargs["seed"] = _coerce(data["seed"], int, "seed")
    if "out_dir" in data and data["out_dir"] is not None:
        kwargs["out_dir"] = _coerce(data["out_dir"], str, "out_dir")
    for section, cls in _SECTIONS.items():
        if section in data:
            kwargs[section] = _build_dataclass_resolved(cls, data[section], section)
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("", str(exc)) from exc


def _build_dataclass_resolved(cls: type, data: Mapping[str, Any], path: str) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = _ANNOT[cls]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    kwargs = {}
    for name in data:
        sub_path = f"{path}.{name}"
        hint = hints[name]
        if dataclasses.is_dataclass(hint) and isinstance(hint, type):
            kwargs[name] = _build_dataclass_resolved(hint, data[name], sub_path)
        else:
            kwargs[name] = _coerce(data[name], hint, sub_path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    return config_from_dict(apply_overrides(raw, overrides or []))


def apply_overrides(data: Mapping[str, Any], overrides: list[str]) -> dict:
    """Apply flat `a.b.c=value` assignments; values parse as JSON when they
    can, else as strings."""
    out = json.loads(json.dumps(data))  # deep copy, JSON-typed
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like path.to.field=value")
        key, _, raw_value = item.partition("=")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, f"cannot descend through non-object at {part!r}")
        node[parts[-1]] = value
    return out


def default_config_dict() -> dict:
    return ExperimentConfig().to_dict()
