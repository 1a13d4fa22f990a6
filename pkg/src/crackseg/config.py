"""Plain-text ``key = value`` run configuration used by the command line."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .architectures import EnsembleConfig, ResUNetConfig
from .errors import ConfigError
from .training import TrainConfig


@dataclass
class RunConfig:
    # model
    model: str = "resunet"
    kernel_size: int = 3
    depth: int = 3
    base_filters: int = 16
    # stage-1 / single-model training
    batch_size: int = 32
    epochs: int = 15
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    # ensemble
    base_kernel_sizes: tuple = (3, 5, 7, 9)
    meta_channels: int = 16
    meta_hidden: int = 2
    stage2_batch_size: int = 0
    stage2_epochs: int = 0
    stage2_learning_rate: float = 0.0
    # data
    data: str = ""
    image_size: int = 128
    split: tuple = (0.8, 0.1, 0.1)
    threshold: float = 0.5
    out: str = "."
    record_timing: bool = False

    def net_config(self, kernel_size: int | None = None) -> ResUNetConfig:
        return ResUNetConfig(kernel_size=kernel_size or self.kernel_size, depth=self.depth,
                             base_filters=self.base_filters)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           learning_rate=self.learning_rate, seed=self.seed,
                           optimizer=self.optimizer)

    def stage2_config(self) -> TrainConfig:
        """Meta-block training; zero-valued stage2 fields fall back to stage 1."""
        return TrainConfig(batch_size=self.stage2_batch_size or self.batch_size,
                           epochs=self.stage2_epochs or self.epochs,
                           learning_rate=self.stage2_learning_rate or self.learning_rate,
                           seed=self.seed, optimizer=self.optimizer)

    def ensemble_config(self) -> EnsembleConfig:
        return EnsembleConfig(base_kernel_sizes=self.base_kernel_sizes,
                              meta_channels=self.meta_channels, meta_hidden=self.meta_hidden)

    def validate(self) -> "RunConfig":
        if self.model not in ("unet", "segnet", "resunet"):
            raise ConfigError(f"model must be unet, segnet or resunet, got {self.model!r}")
        self.net_config()
        self.train_config()
        self.stage2_config()
        self.ensemble_config()
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-6 or min(self.split) < 0:
            raise ConfigError(f"split must be three ratios summing to 1, got {self.split}")
        if self.image_size < 2:
            raise ConfigError(f"image_size must be >= 2, got {self.image_size}")
        if not 0 <= self.threshold <= 1:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | os.PathLike, name: str = "config.txt") -> Path:
        path = Path(directory) / name
        path.write_text(self.to_text())
        return path


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TUPLE_TYPES = {"base_kernel_sizes": int, "split": float}


def _convert(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    raw = raw.strip()
    if isinstance(default, str):
        return raw
    try:
        if key in _TUPLE_TYPES:
            return tuple(_TUPLE_TYPES[key](x) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _convert(key, raw)
    return values


def resolve(config_path: str | os.PathLike | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then command-line overrides."""
    values: dict = {}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"{config_path}: cannot read config ({exc})") from exc
        values.update(parse_config_text(text, str(config_path)))
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, v) if isinstance(v, str) else v
    return dataclasses.replace(RunConfig(), **values).validate()
