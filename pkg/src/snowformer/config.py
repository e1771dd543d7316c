"""Run configuration: JSON file sections with CLI flag overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .errors import InvalidConfig, IoError
from .hashing import config_sha256
from .model import ModelConfig
from .synth import SynthConfig
from .training import LossConfig, LRSchedule

_SECTIONS = ("model", "synth", "loss", "sched", "tiling", "seed")


def _build(cls, d, section):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise InvalidConfig(f"unknown {section} config keys: {sorted(unknown)}")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(d)
    return cls(**d)


@dataclass
class TilingConfig:
    tile: int = 256
    overlap: int = 32

    def to_dict(self):
        return {"tile": self.tile, "overlap": self.overlap}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sched: LRSchedule = field(default_factory=LRSchedule)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=_build(ModelConfig, d.get("model", {}), "model"),
            synth=_build(SynthConfig, d.get("synth", {}), "synth"),
            loss=_build(LossConfig, d.get("loss", {}), "loss"),
            sched=_build(LRSchedule, d.get("sched", {}), "sched"),
            tiling=_build(TilingConfig, d.get("tiling", {}), "tiling"),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except OSError as e:
            raise IoError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise InvalidConfig(f"config {path} must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "synth": self.synth.to_dict(),
            "loss": self.loss.to_dict(),
            "sched": self.sched.to_dict(),
            "tiling": self.tiling.to_dict(),
            "seed": self.seed,
        }

    def sha256(self) -> str:
        return config_sha256(self.to_dict())
