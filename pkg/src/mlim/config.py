"""Run configuration: nested dataclasses, strict JSON loading, seed resolution.

Configs are plain JSON with one object per section; unknown keys anywhere are
rejected so typos cannot silently fall back to defaults. The effective seed
is resolved as: --seed flag, then the MLIM_SEED environment variable, then
the config file value.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .masking import MAMConfig, MdoConfig
from .model import ModelConfig
from .training import FinetuneSettings, PretrainSettings


class ConfigError(ValueError):
    """Unreadable, malformed, or semantically invalid configuration."""


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 4096
    n_eval: int = 1024
    n_pairs_train: int = 2048
    n_pairs_test: int = 1024
    match_fraction: float = 0.5
    image_size: int = 64

    def validate(self) -> None:
        if min(self.n_train, self.n_eval, self.n_pairs_train, self.n_pairs_test) < 1:
            raise ValueError("dataset sizes must be >= 1")
        if not 0.0 < self.match_fraction < 1.0:
            raise ValueError(f"match_fraction {self.match_fraction} outside (0, 1)")
        if self.image_size % 8 != 0 or self.image_size < 40:
            # 40 is the smallest multiple of 8 with a valid center for every shape size
            raise ValueError(f"image_size {self.image_size} must be a multiple of 8, >= 40")


@dataclass(frozen=True)
class ProbeConfig:
    mask_probs: tuple[float, ...] = (0.1, 0.3, 0.5, 0.75)
    n_items: int = 256
    gray_level: float = 0.5
    batch: int = 32

    def validate(self) -> None:
        if not self.mask_probs or any(not 0.0 <= p <= 1.0 for p in self.mask_probs):
            raise ValueError(f"mask_probs must be non-empty, all in [0, 1]: {self.mask_probs}")
        if not 0.0 <= self.gray_level <= 1.0:
            raise ValueError(f"gray_level {self.gray_level} outside [0, 1]")
        if self.n_items < 1 or self.batch < 1:
            raise ValueError("n_items and batch must be >= 1")


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    naive_prob: float = 0.2

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("ablation needs at least one seed")
        if not 0.0 < self.naive_prob < 1.0:
            raise ValueError(f"naive_prob {self.naive_prob} outside (0, 1)")


@dataclass(frozen=True)
class FullConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mam: MAMConfig = field(default_factory=MAMConfig)
    mdo: MdoConfig = field(default_factory=MdoConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> None:
        for section in (
            self.model, self.data, self.mam, self.mdo,
            self.pretrain, self.finetune, self.probe, self.ablation,
        ):
            section.validate()
        if self.data.image_size != self.model.image_size:
            raise ValueError(
                f"data.image_size {self.data.image_size} != model.image_size "
                f"{self.model.image_size}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "mam": MAMConfig,
    "mdo": MdoConfig,
    "pretrain": PretrainSettings,
    "finetune": FinetuneSettings,
    "probe": ProbeConfig,
    "ablation": AblationConfig,
}


def _build_section(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {path!r} must be an object, got {type(raw).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path!r}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad value in {path!r}: {e}") from e


def config_from_dict(d: dict) -> FullConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"config root must be an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    sections = {
        name: _build_section(cls, d.get(name, {}), name) for name, cls in _SECTIONS.items()
    }
    cfg = FullConfig(seed=seed, **sections)
    try:
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path) -> FullConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    return config_from_dict(raw)


def resolve_seed(flag_seed: int | None, cfg: FullConfig) -> int:
    """Precedence: --seed flag, then MLIM_SEED, then the config value."""
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("MLIM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"MLIM_SEED must be an integer, got {env!r}") from e
    return cfg.seed
