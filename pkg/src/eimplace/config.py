"""Merged run configuration, echoed into every run directory."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .expert import DEFAULT_K_PER_STEP, DEFAULT_M
from .netlist import SynthConfig
from .ppo import PPOConfig
from .reward import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertConfig:
    count: int = 50
    m: int = DEFAULT_M
    k_per_step: int = DEFAULT_K_PER_STEP


# section name -> dataclass; ``seed`` inside sections comes from the top level
SECTIONS = {"synth": SynthConfig, "expert": ExpertConfig, "train": TrainConfig, "ppo": PPOConfig}
_SEEDED = ("train", "ppo")


def default_out_dir() -> str:
    return os.environ.get("EIM_OUT_DIR", "runs")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    seed: int = 0
    threads: int = 1
    out_dir: str = field(default_factory=default_out_dir)

    def to_dict(self) -> dict:
        """Serializable echo; ``threads`` is left out since it must not change results."""
        doc = asdict(self)
        doc.pop("threads")
        for name in _SEEDED:
            doc[name].pop("seed", None)
        return doc

    def seeded(self) -> "RunConfig":
        """Copy whose train/ppo seeds equal the run seed."""
        return replace(self, train=replace(self.train, seed=self.seed),
                       ppo=replace(self.ppo, seed=self.seed))

    def set(self, section: str, key: str, value) -> "RunConfig":
        if section not in SECTIONS:
            return replace(self, **{key: value})
        return replace(self, **{section: replace(getattr(self, section), **{key: value})})


def _section(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in fields(cls)} - ({"seed"} if where in _SEEDED else set())
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(doc: dict) -> RunConfig:
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    kw = {name: _section(cls, doc[name], name) for name, cls in SECTIONS.items() if name in doc}
    for key in ("seed", "threads", "out_dir"):
        if key in doc:
            kw[key] = doc[key]
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(doc)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
