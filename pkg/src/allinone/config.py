"""Experiment configuration files (JSON), validated before any work starts."""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from pydantic import ConfigDict, TypeAdapter, ValidationError

from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class DataConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    root: Optional[str] = None              # defaults to $ALLINONE_DATA_DIR, then ~/data
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    per_class: Optional[int] = None         # CIFAR per-class subsampling


@dataclass
class DvfsConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    calibration: list[list[float]] = field(default_factory=lambda: [[1820, 400, 33.7], [1820, 525, 28.1]])
    clocks: list[float] = field(default_factory=lambda: [305, 442, 587])
    switch_mmacs: list[float] = field(default_factory=lambda: [850, 480, 350])
    dense_mmacs: Optional[float] = 1820
    trace: Optional[str] = None
    backend: str = "model"


@dataclass
class BenchConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    repetitions: int = 20
    batch: int = 32
    float32: bool = True


@dataclass
class ExperimentConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    dvfs: DvfsConfig = field(default_factory=DvfsConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output: str = "runs/default"
    plots: bool = False

    def to_dict(self):
        return asdict(self)


_ADAPTER = TypeAdapter(ExperimentConfig)


def parse_config(raw):
    """Validate a dict; unknown keys anywhere are rejected."""
    try:
        return _ADAPTER.validate_python(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from None


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw)
