"""Run configuration shared by the CLI subcommands.

Precedence: built-in preset defaults, then values from a ``--config`` JSON
file, then explicit command-line flags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .fusion import MftConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 1
    grid_resolution: int = 128
    select_n: int = 4
    shift_refetch: bool = True
    selection_epsilon: float = 1e-6
    selection_global_weight: float = 1.0
    mft: MftConfig = field(default_factory=MftConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.preset not in ("desk", "full"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.mft.preset != self.preset or self.train.preset != self.preset:
            raise ConfigError("preset must be consistent across nested configs")

    @staticmethod
    def for_preset(preset: str) -> "RunConfig":
        if preset == "desk":
            return RunConfig()
        if preset == "full":
            return RunConfig(preset="full", grid_resolution=256,
                             mft=MftConfig.full(),
                             train=TrainConfig(preset="full"))
        raise ConfigError(f"unknown preset {preset!r}")

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "grid_resolution": self.grid_resolution,
            "select_n": self.select_n,
            "shift_refetch": self.shift_refetch,
            "selection_epsilon": self.selection_epsilon,
            "selection_global_weight": self.selection_global_weight,
            "mft": self.mft.to_dict(),
            "train": self.train.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        base = RunConfig.for_preset(d.get("preset", "desk")).to_dict()
        for key, value in d.items():
            if key in ("mft", "train"):
                base[key].update(value)
            elif key in base:
                base[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return RunConfig(
                preset=base["preset"], seed=base["seed"],
                grid_resolution=base["grid_resolution"], select_n=base["select_n"],
                shift_refetch=base["shift_refetch"],
                selection_epsilon=base["selection_epsilon"],
                selection_global_weight=base["selection_global_weight"],
                mft=MftConfig.from_dict(base["mft"]),
                train=TrainConfig.from_dict(base["train"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def load(path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            return RunConfig.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config JSON: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
