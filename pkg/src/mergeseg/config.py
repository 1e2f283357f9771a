"""Plain-text (INI) run configuration with explicit defaults echoed back out.

Sections map onto the config dataclasses: [model] -> ModelConfig (minus the
nested loss weights, which live in [loss]), [train] -> TrainConfig,
[data] -> DataConfig. Unknown keys are configuration errors; saving writes
every effective value so run manifests are complete.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields as dc_fields

from .errors import ConfigurationError
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    size: int = 64
    num_train: int = 200
    num_val: int = 50
    num_classes: int = 3
    seed: int = 7
    boundary_radius: int = 1

    def __post_init__(self):
        if self.num_train < 0 or self.num_val < 0:
            raise ConfigurationError("dataset counts must be >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _coerce(raw: str, target_type):
    if target_type is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"cannot parse boolean from {raw!r}")
    return target_type(raw)


def _apply_section(obj, section: configparser.SectionProxy, name: str) -> None:
    types = {f.name: type(getattr(obj, f.name)) for f in dc_fields(obj)}
    for key, raw in section.items():
        if key not in types or key == "loss":
            raise ConfigurationError(f"unknown key [{name}] {key}")
        try:
            setattr(obj, key, _coerce(raw, types[key]))
        except ValueError as err:
            raise ConfigurationError(f"bad value for [{name}] {key}: {raw!r}") from err


def load_config(path=None) -> RunConfig:
    """Defaults, optionally overridden by an INI file."""
    run = RunConfig()
    if path is None:
        return run
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"cannot read config file {path}")
    for section in parser.sections():
        if section == "model":
            _apply_section(run.model, parser[section], section)
        elif section == "loss":
            _apply_section(run.model.loss, parser[section], section)
        elif section == "train":
            _apply_section(run.train, parser[section], section)
        elif section == "data":
            _apply_section(run.data, parser[section], section)
        else:
            raise ConfigurationError(f"unknown config section [{section}]")
    run.model.__post_init__()
    run.train.__post_init__()
    run.data.__post_init__()
    return run


def config_text(run: RunConfig) -> str:
    """Every effective value, suitable for the run manifest."""
    parser = configparser.ConfigParser()
    parser["model"] = {f.name: str(getattr(run.model, f.name))
                       for f in dc_fields(run.model) if f.name != "loss"}
    parser["loss"] = {f.name: str(getattr(run.model.loss, f.name))
                      for f in dc_fields(run.model.loss)}
    parser["train"] = {f.name: str(getattr(run.train, f.name)) for f in dc_fields(run.train)}
    parser["data"] = {f.name: str(getattr(run.data, f.name)) for f in dc_fields(run.data)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(path, run: RunConfig) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(config_text(run))
