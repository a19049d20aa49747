"""Strict JSON configuration.

Dataclass configs are built from plain JSON objects; unknown keys anywhere in
the tree are rejected before any work starts. The ``AEDKIT_SEED`` environment
variable, when set, takes precedence over the ``seed`` in a config file.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass
from pathlib import Path

from .audio import FeatureConfig
from .augment import AugmentSpec
from .datasets import ToyDatasetSpec
from .model import ModelConfig
from .training import TrainConfig, BCE

SEED_ENV = "AEDKIT_SEED"


class ConfigError(ValueError):
    pass


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _convert(tp, value, where, base=None):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: null not allowed")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where, base if isinstance(base, tp) else None)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if args else typing.Any
        return tuple(_convert(inner, v, f"{where}[{i}]") for i, v in enumerate(value))
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        (inner,) = typing.get_args(tp)
        return [_convert(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        _, inner = typing.get_args(tp)
        return {k: _convert(inner, v, f"{where}.{k}") for k, v in value.items()}
    if origin in (typing.Union, types.UnionType):
        for arg in typing.get_args(tp):
            try:
                return _convert(arg, value, where)
            except ConfigError:
                continue
        raise ConfigError(f"{where}: {value!r} matches none of {tp}")
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def from_dict(cls, data, where: str = "config", base=None):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys.

    Keys left out keep their values from ``base`` (or the field defaults), and
    nested objects are merged the same way, so ``{"gain_db": {"probability": 1}}``
    keeps the default dB range.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        current = getattr(base, k) if base is not None else _default_of(fields[k])
        kwargs[k] = _convert(hints[k], v, f"{where}.{k}", current)
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(obj):
    return dataclasses.asdict(obj)


@dataclass(frozen=True)
class DatasetConfig:
    """``kind`` is ``esc50``, ``multilabel`` or ``toy``."""

    kind: str = "esc50"
    meta_csv: str | None = None
    audio_dir: str | None = None
    strict: bool = False
    clip_seconds: float | None = None
    toy: ToyDatasetSpec | None = None

    def __post_init__(self):
        if self.kind not in ("esc50", "multilabel", "toy"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "toy" and self.toy is None:
            raise ValueError("toy datasets need a 'toy' section")
        if self.kind != "toy" and self.meta_csv is None:
            raise ValueError(f"{self.kind} datasets need 'meta_csv'")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    output_dir: str = "runs/experiment"
    seed: int = 0
    workers: int = 1
    eval_folds: tuple[int, ...] | None = None
    init_weights: str | None = None
    features: FeatureConfig = FeatureConfig()
    augment: AugmentSpec | None = None
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()


@dataclass(frozen=True)
class GridEntryConfig:
    name: str
    model: ModelConfig = ModelConfig()
    init: str = "scratch"
    pretrain: str | None = None
    pretrain_augment: AugmentSpec | None = None
    augment: AugmentSpec | None = None
    dataset: str = "esc50"


@dataclass(frozen=True)
class GridConfig:
    datasets: dict[str, DatasetConfig]
    entries: list[GridEntryConfig]
    output_dir: str = "runs/ablation"
    seed: int = 0
    workers: int = 1
    features: FeatureConfig = FeatureConfig()
    train: TrainConfig = TrainConfig()
    pretrain_train: TrainConfig = TrainConfig(epochs=None, loss_mode=BCE)


def _seed_override(data: dict) -> dict:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            data = dict(data, seed=int(env))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return data


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def load_experiment(path) -> ExperimentConfig:
    return from_dict(ExperimentConfig, _seed_override(read_json(path)), "experiment")


def load_grid(path) -> GridConfig:
    return from_dict(GridConfig, _seed_override(read_json(path)), "grid")


def echo(obj) -> str:
    """Canonical JSON of a resolved config, written next to every output."""
    return json.dumps(to_dict(obj), indent=2, sort_keys=True, default=str)
