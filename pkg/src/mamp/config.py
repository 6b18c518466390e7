"""Run configuration: dataclasses, strict YAML loading and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from mamp.errors import ConfigError
from mamp.model import ArchConfig

DESK_ARCH = ArchConfig(
    V=15, T_s=24, segment_len=4, embed_dim=64, depth=4, decoder_depth=2,
    decoder_dim=64, num_heads=4, mlp_dim=256,
)


@dataclass
class PretrainConfig:
    arch: ArchConfig = DESK_ARCH
    corpus: str = ""
    epochs: int = 100
    batch_size: int = 32
    warmup_epochs: int = 20
    peak_lr: float = 1e-3
    floor_lr: float = 5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    masking: str = "motion"
    temperature: float = 1.0
    augment: bool = True
    resample_masks: bool = True
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if self.masking not in ("motion", "random"):
            raise ConfigError(f"masking must be 'motion' or 'random', got {self.masking!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class EvalConfig:
    mode: str = "linear"
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.1
    floor_lr: float = 0.0
    warmup_epochs: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    layer_decay: float = 0.65
    label_fraction: float = 1.0
    pooling: str = "mean"
    standardize: bool = True
    augment: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in ("linear", "finetune"):
            raise ConfigError(f"mode must be 'linear' or 'finetune', got {self.mode!r}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if self.pooling != "mean":
            raise ConfigError(f"unsupported pooling {self.pooling!r}")

    @classmethod
    def linear(cls, **kw) -> "EvalConfig":
        return cls(mode="linear", **kw)

    @classmethod
    def finetune(cls, **kw) -> "EvalConfig":
        base = dict(mode="finetune", epochs=100, batch_size=48, lr=3e-4, floor_lr=1e-5,
                    warmup_epochs=5, weight_decay=0.05, standardize=False, augment=True)
        base.update(kw)
        return cls(**base)


@dataclass
class AblationConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple[int, ...] = (0,)
    values: dict[str, list] = field(default_factory=dict)


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a section, got {value!r}")
        return from_dict(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    if tp is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected int, got {value!r}")
    return value


def from_dict(cls, d: dict, where: str = ""):
    """Build dataclass ``cls`` from a nested mapping; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in d.items():
        # a partial nested section overrides the field's default instance
        base = defaults[k]
        if dataclasses.is_dataclass(base) and isinstance(v, dict):
            v = {**dataclasses.asdict(base), **v}
        kwargs[k] = _convert(hints[k], v, f"{where}.{k}" if where else k)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return json.loads(json.dumps(d))


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path: Path, cls=PretrainConfig):
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed config: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(cls, raw)


def dump_config(cfg, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False), encoding="utf-8")
