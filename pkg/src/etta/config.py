"""Run configuration: one JSON file describing a whole experiment.

Every section is optional and falls back to its defaults; unknown keys are
rejected at every level. Relative paths are resolved against the directory
of the config file. See ``docs/config.md`` for the schema.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .adapt import TTAConfig
from .data import CORRUPTIONS
from .train import TrainConfig
from .vit import ConfigError, ViTConfig

METHODS = ("noadapt", "merge_only", "navia", "navia_r0", "navia_deep", "navia_uniform")


@dataclass(frozen=True)
class DataConfig:
    train_per_class: int = 1000
    test_per_class: int = 100
    source_images: int = 64
    seed: int = 0


@dataclass(frozen=True)
class StreamConfig:
    corruptions: tuple[str, ...] = CORRUPTIONS
    severity: int = 5
    images: int = 2048
    seeds: tuple[int, ...] = (0,)
    heldout_images: int = 256  # target images for hyperparameter selection

    def __post_init__(self):
        bad = [c for c in self.corruptions if c not in CORRUPTIONS]
        if bad:
            raise ConfigError(f"unknown corruptions {bad}")
        if not 1 <= self.severity <= 5:
            raise ConfigError("severity must be in 1..5")
        if self.images < 1:
            raise ConfigError("stream needs at least one image")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    checkpoint: str = "model/vit.etta"
    stats_dir: str = "model"
    out: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tta: TTAConfig = field(default_factory=TTAConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    methods: tuple[str, ...] = ("noadapt", "merge_only", "navia")
    select_hyperparameters: bool = False
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        self.tta.check_model(self.model.num_layers)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {
    "model": ViTConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "tta": TTAConfig,
    "stream": StreamConfig,
    "paths": PathsConfig,
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    return cls(**kwargs)


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(raw) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw[name], name)
    if "methods" in raw:
        kwargs["methods"] = tuple(raw["methods"])
    if "select_hyperparameters" in raw:
        kwargs["select_hyperparameters"] = bool(raw["select_hyperparameters"])
    cfg = RunConfig(**kwargs)
    if base_dir is not None:
        cfg = replace(cfg, paths=resolve_paths(cfg.paths, base_dir))
    return cfg


def resolve_paths(paths: PathsConfig, base_dir: Path) -> PathsConfig:
    return PathsConfig(**{k: str((Path(base_dir) / v).resolve()) for k, v in asdict(paths).items()})


def load(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw, path.parent)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """``--seed`` override: one stream seed, also used for data generation and training."""
    return replace(
        cfg,
        data=replace(cfg.data, seed=seed),
        train=replace(cfg.train, seed=seed),
        tta=replace(cfg.tta, seed=seed),
        stream=replace(cfg.stream, seeds=(seed,)),
    )
