"""Run configuration: dataclasses, TOML loading, validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ModelConfig:
    arch: str = "resnet18"
    stages: int = 2
    image_size: int = 384
    d_model: int = 256
    heads: int = 4
    layers: int = 4
    ffn_dim: int = 2048
    dropout: float = 0.1
    dropout_fc: float = 0.35
    fd_kernel: int = 3
    pretrained: str | None = None
    freeze_backbone: bool = False


@dataclass
class AugmentConfig:
    mask1: bool = True
    fragments: int = 4
    box: int = 18
    fill: float = 0.0
    beta_range: tuple[float, float] = (-64.0, 64.0)
    alpha_range: tuple[float, float] = (-0.3, 0.3)
    threshold: float | None = None
    noise_sigma: float = 0.01  # fraction of i_max


@dataclass
class TrainConfig:
    lr_init: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 32
    mask_ratio: float = 0.25
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    max_epochs: int = 50
    loss_scope: str = "all"  # or "masked"
    threshold: float = 0.5
    prefetch: int = 0  # 0 = single-producer deterministic loading


@dataclass
class DataConfig:
    vocab: str = ""
    train: str = ""
    val: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    device: str = "cpu"
    out_dir: str = "runs/default"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        cfg = _build(cls, raw, "")
        validate(cfg)
        return cfg


def _build(cls, raw: dict[str, Any], prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(prefix or "<root>", "expected a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(path, "unknown field")
        f = known[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path)
        else:
            kwargs[key] = _coerce(value, default, path)
    return cls(**kwargs)


def _coerce(value, default, path: str):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(path, f"expected a list of {len(default)} numbers")
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def validate(cfg: RunConfig) -> None:
    m, a, t = cfg.model, cfg.augment, cfg.train
    checks = [
        ("model.arch", m.arch in ("resnet18", "resnet152"), "must be resnet18 or resnet152"),
        ("model.stages", 1 <= m.stages <= 4, "must be in 1..4"),
        ("model.d_model", m.d_model > 0 and m.d_model % m.heads == 0, "must be a positive multiple of model.heads"),
        ("model.layers", m.layers >= 1, "must be >= 1"),
        ("model.image_size", m.image_size > 0 and m.image_size % (4 * 2 ** (m.stages - 1)) == 0,
         "must be divisible by the backbone stride"),
        ("model.dropout", 0 <= m.dropout < 1, "must be in [0, 1)"),
        ("model.dropout_fc", 0 <= m.dropout_fc < 1, "must be in [0, 1)"),
        ("augment.box", a.box >= 2 and a.box % 2 == 0, "must be even and >= 2"),
        ("augment.fragments", a.fragments >= 1, "must be >= 1"),
        ("augment.alpha_range", a.alpha_range[0] > -1, "lower bound must be > -1"),
        ("augment.noise_sigma", a.noise_sigma >= 0, "must be >= 0"),
        ("train.lr_init", t.lr_init >= 0, "must be >= 0"),
        ("train.batch_size", t.batch_size >= 1, "must be >= 1"),
        ("train.mask_ratio", 0 <= t.mask_ratio <= 1, "must be in [0, 1]"),
        ("train.plateau_patience", t.plateau_patience >= 1, "must be >= 1"),
        ("train.plateau_factor", 0 < t.plateau_factor < 1, "must be in (0, 1)"),
        ("train.max_epochs", t.max_epochs >= 0, "must be >= 0"),
        ("train.loss_scope", t.loss_scope in ("all", "masked"), "must be 'all' or 'masked'"),
        ("train.threshold", 0 < t.threshold < 1, "must be in (0, 1)"),
    ]
    for path, ok, msg in checks:
        if not ok:
            raise ConfigError(path, msg)


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a TOML run config; ``overrides`` maps dotted paths to values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"config file not found: {path}")
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("<file>", str(e)) from None
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = RunConfig.from_dict(raw)
    base = path.parent
    for name in ("vocab", "train", "val"):
        value = getattr(cfg.data, name)
        if value and not os.path.isabs(value):
            setattr(cfg.data, name, str(base / value))
    return cfg


def home_dir() -> Path:
    """Root for caches and checkpoints (``MASKCT_HOME``, default ``./.maskct``)."""
    return Path(os.environ.get("MASKCT_HOME", ".maskct"))
