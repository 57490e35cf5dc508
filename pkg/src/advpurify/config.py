"""Run configuration: nested dataclasses, YAML loading, and flag overrides.

Every leaf is addressable as ``section.key`` (for example ``attack.epsilon``)
both in the YAML file and as a ``--section.key`` command-line flag.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

import yaml

from .seeding import derive_seed


class ConfigError(ValueError):
    """The configuration file or a flag value violates the schema."""


@dataclass
class PathsSection:
    output_dir: str = "runs/default"
    data: str | None = None
    classifier: str | None = None
    denoiser: str | None = None
    robust_classifier: str | None = None
    sweep: str | None = None


@dataclass
class DataSection:
    n_samples: int = 4000
    image_size: int = 32
    center_size: int = 10
    radius_min: int = 1
    radius_max: int = 3
    amplitude_min: float = 0.35
    amplitude_max: float = 0.55
    background_mean: float = 0.40
    background_std: float = 0.08
    background_sigma: float = 1.0
    pixel_noise_std: float = 0.05
    max_distractors: int = 2
    split: tuple = (0.8, 0.1, 0.1)


@dataclass
class ScheduleSection:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ClassifierSection:
    epochs: int = 25
    batch_size: int = 64
    lr: float = 1e-3
    widths: tuple = (16, 32, 64)
    hidden: int = 64


@dataclass
class DiffusionSection:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    grad_clip: float = 1.0
    base_width: int = 32
    ema_decay: float = 0.995
    lr_decay: str = "cosine"


@dataclass
class AttackSection:
    epsilon: float = 2 / 255
    num_steps: int = 20
    step_size: float | None = None
    random_start: bool = True


@dataclass
class AdvTrainSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    epsilon: float = 2 / 255
    num_steps: int = 10
    step_size: float | None = None
    warmup_epochs: int = 0
    n_val: int = 200


@dataclass
class EvalSection:
    n_test: int = 200
    t_star: float | None = None
    t_tolerance: float = 0.02
    defenses: tuple = ("none", "noise", "purify", "adv_trained")
    record_timing: bool = True


@dataclass
class SweepSection:
    t_min: float = 0.001
    t_max: float = 0.300
    points: int = 10
    n_val: int = 100


@dataclass
class DumpSection:
    index: int = 0
    t: float | None = None


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    attack: AttackSection = field(default_factory=AttackSection)
    adv_train: AdvTrainSection = field(default_factory=AdvTrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    dump: DumpSection = field(default_factory=DumpSection)

    def seeds(self) -> dict[str, int]:
        """Child seeds, one per stochastic consumer."""
        names = ("data", "split", "classifier", "diffusion", "attack", "adv_train", "defense", "sweep", "dump")
        return {name: derive_seed(self.seed, name) for name in names}

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def leaf_keys(cfg: RunConfig | None = None) -> dict[str, typing.Any]:
    """Map of ``section.key`` (or top-level ``key``) to its declared type."""
    cfg = cfg or RunConfig()
    out = {}
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        if dataclasses.is_dataclass(section):
            hints = typing.get_type_hints(type(section))
            for sub in dataclasses.fields(section):
                out[f"{f.name}.{sub.name}"] = hints[sub.name]
        else:
            out[f.name] = typing.get_type_hints(RunConfig)[f.name]
    return out


def _strip_optional(tp):
    args = typing.get_args(tp)
    if (typing.get_origin(tp) in (typing.Union, types.UnionType)) and type(None) in args:
        return next(a for a in args if a is not type(None)), True
    return tp, False


def coerce(key: str, tp, value):
    """Convert ``value`` (from YAML or a flag string) to the declared type of ``key``."""
    base, optional = _strip_optional(tp)
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
        if optional:
            return None
        raise ConfigError(f"{key} may not be empty")
    try:
        if base is bool:
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("true", "1", "yes", "on"):
                return True
            if str(value).lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if base is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if base is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if base is str:
            return str(value)
        if base is tuple:
            items = value.split(",") if isinstance(value, str) else list(value)
            items = [i.strip() if isinstance(i, str) else i for i in items]
            return tuple(_auto(i) for i in items)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(base, '__name__', base)}") from exc
    raise ConfigError(f"{key}: unsupported type {tp}")


def _auto(item):
    if not isinstance(item, str):
        return item
    for conv in (int, float):
        try:
            return conv(item)
        except ValueError:
            pass
    return item


def set_key(cfg: RunConfig, key: str, value) -> None:
    types_ = leaf_keys(cfg)
    if key not in types_:
        raise ConfigError(f"unknown config key {key!r}")
    value = coerce(key, types_[key], value)
    if "." in key:
        section, name = key.split(".", 1)
        setattr(getattr(cfg, section), name, value)
    else:
        setattr(cfg, key, value)


def apply_mapping(cfg: RunConfig, data: dict, source: str = "config") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    for name, value in data.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                set_key(cfg, f"{name}.{sub}", v)
        else:
            set_key(cfg, name, value)


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return data or {}


def dump_yaml(data: dict) -> str:
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)
