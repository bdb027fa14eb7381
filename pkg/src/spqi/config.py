"""Run configuration: one JSON document for generation, training and the grid.

Top-level keys (all optional):

``synth``
    fields of :class:`spqi.synth.SynthConfig`; ``signal_strengths`` is a
    nested object of :class:`spqi.synth.SignalStrengths` fields
``target_r``
    calibrate the prior-purchase weight to this correlation before
    generating (``null`` to use the weight as given)
``train``
    fields of :class:`spqi.training.TrainConfig`; ``model`` is a nested
    object of :class:`spqi.gat.ModelConfig` fields
``grid_seeds``
    seeds for ``grid``

Every unknown key, at any level, is rejected with its dotted path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .gat import ModelConfig
from .synth import SignalStrengths, SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_NESTED = {
    (SynthConfig, "signal_strengths"): SignalStrengths,
    (TrainConfig, "model"): ModelConfig,
}


def _check_keys(obj: dict, cls, path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for k, v in obj.items():
        if k not in names:
            raise ConfigError(f"unknown config key {path}.{k}")
        sub = _NESTED.get((cls, k))
        if sub is not None:
            _check_keys(v, sub, f"{path}.{k}")


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    target_r: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    grid_seeds: tuple[int, ...] = (0,)

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "target_r": self.target_r,
            "train": self.train.to_dict(),
            "grid_seeds": list(self.grid_seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        for k in d:
            if k not in ("synth", "target_r", "train", "grid_seeds"):
                raise ConfigError(f"unknown config key {k}")
        _check_keys(d.get("synth", {}), SynthConfig, "synth")
        _check_keys(d.get("train", {}), TrainConfig, "train")
        try:
            synth = SynthConfig.from_dict(d.get("synth", {}))
            train = TrainConfig.from_dict(d.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        target = d.get("target_r")
        seeds = d.get("grid_seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("grid_seeds must be a non-empty list of integers")
        return cls(synth, None if target is None else float(target), train, tuple(seeds))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(d)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
