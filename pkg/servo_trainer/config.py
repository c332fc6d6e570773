"""
Run configuration: one YAML mapping per subcommand plus a global seed.

    seed: 7
    gen-data:
      scenes: 200
      levels: [S, M]
      scene: {budget: 512, cluster_range: [2, 6]}
    train:
      epochs: 12
      model: {width: 32, fusion: cluster}
    bench:
      levels: [S, M, L]
      runs_per_level: 50
      episode: {max_steps: 600, provider: {mode: true-depth}}
      ibvs: {gain: 1.0, damping: 0.0}

Command-line flags override file values. Nested dataclass fields (region,
scene, intrinsics, provider, hpr, noise, augmentation, episode) take nested
mappings; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

import yaml

from analysis.benchmark import BenchmarkConfig
from servo_trainer.controllers import IbvsConfig
from servo_trainer.model import ModelConfig
from servo_trainer.simulation import EpisodeConfig
from servo_trainer.training import DataConfig, TrainConfig

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train", "bench", "ablate", "report")

T = TypeVar("T")


def build_dataclass(cls: Type[T], values: Optional[Mapping[str, Any]], base: Optional[T] = None) -> T:
    """
    ``cls`` (or ``base``) with ``values`` applied. Nested mappings update nested
    dataclass fields and lists become tuples.
    """
    obj = cls() if base is None else base
    if not values:
        return obj
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    changes: Dict[str, Any] = {}
    for key, value in values.items():
        current = getattr(obj, key)
        if isinstance(value, Mapping) and dataclasses.is_dataclass(current):
            changes[key] = build_dataclass(type(current), value, current)
        elif isinstance(value, list) and isinstance(current, tuple):
            changes[key] = tuple(value)
        else:
            changes[key] = value
    return dataclasses.replace(obj, **changes)


@dataclass
class RunConfig:
    """Seed plus per-command sections; ``path`` names the YAML file it came from, if any."""
    seed: Optional[int] = None
    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    path: Optional[str] = None

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ValueError(f"cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ValueError(f"config file {path} is not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ValueError(f"config file {path} must hold a mapping, got {type(data).__name__}")
        seed = data.pop("seed", None)
        unknown = sorted(set(data) - set(COMMANDS))
        if unknown:
            raise ValueError(f"unknown config sections in {path}: {', '.join(unknown)}")
        sections = {}
        for name, section in data.items():
            if section is None:
                section = {}
            if not isinstance(section, dict):
                raise ValueError(f"config section {name!r} must be a mapping")
            sections[name] = section
        logger.debug("loaded config %s (sections: %s)", path, ", ".join(sections) or "none")
        return cls(None if seed is None else int(seed), sections, path)

    def section(self, command: str) -> Dict[str, Any]:
        return dict(self.sections.get(command, {}))

    def resolve(self, command: str, seed: Optional[int], overrides: Mapping[str, Any]) -> Dict[str, Any]:
        """The command's section with non-None flag values written over it; the seed is mandatory."""
        resolved_seed = seed if seed is not None else self.seed
        if resolved_seed is None:
            raise ValueError("a seed is required: pass --seed or set 'seed' in the config file")
        section = _merge(self.section(command), overrides)
        section["seed"] = int(resolved_seed)
        return section


def _merge(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            sub = _merge(out.get(key) or {}, value)
            if sub:
                out[key] = sub
        else:
            out[key] = value
    return out


def parse_levels(value: Any) -> Optional[tuple]:
    """'S,M,L' or a list of level names."""
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(str(v).strip().upper() for v in value)


def data_config(section: Mapping[str, Any]) -> DataConfig:
    values = {k: v for k, v in section.items() if k not in ("seed", "models", "primitives")}
    if "levels" in values:
        values["levels"] = parse_levels(values["levels"])
    return build_dataclass(DataConfig, values)


def model_config(section: Optional[Mapping[str, Any]], seed: int) -> ModelConfig:
    values = dict(section or {})
    values.setdefault("seed", seed)
    return ModelConfig.from_dict(values)


def train_config(section: Mapping[str, Any]) -> TrainConfig:
    values = {k: v for k, v in section.items() if k not in ("model", "resume")}
    return build_dataclass(TrainConfig, values)


def episode_config(section: Optional[Mapping[str, Any]]) -> EpisodeConfig:
    return build_dataclass(EpisodeConfig, section)


def ibvs_config(section: Optional[Mapping[str, Any]]) -> IbvsConfig:
    return build_dataclass(IbvsConfig, section)


def benchmark_config(section: Mapping[str, Any]) -> BenchmarkConfig:
    values = {k: v for k, v in section.items()
              if k in ("levels", "runs_per_level", "seed", "workers")}
    if "levels" in values:
        values["levels"] = parse_levels(values["levels"])
    return BenchmarkConfig(episode=episode_config(section.get("episode")), **values)
