"""
Run configuration: one JSON file mirroring a tree of frozen dataclasses.

  {"seed": 0,
   "agent": {"variant": "neural_map", ..., "map": {"channels": 32, ...}},
   "env": {"sizes": [5, 7, ...], ...},
   "train": {"n_envs": 16, ...},
   "paths": {"test_set": "...", "out_dir": "..."}}

Missing keys take the defaults below; unknown keys raise ConfigError naming the
dotted key. `NMAP_SEED` in the environment overrides the seed last.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .neural_map import NeuralMapConfig

AGENT_VARIANTS = ("neural_map", "lstm", "mqn", "random", "oracle")
SEED_ENV_VAR = "NMAP_SEED"


@dataclass(frozen=True)
class EnvConfig:
    sizes: tuple[int, ...] = (5, 7, 9, 11, 13, 15)
    loop_fraction: float = 0.1
    step_limit: int = 100
    step_penalty: float = 0.01

    def __post_init__(self) -> None:
        if not self.sizes:
            raise ConfigError("env.sizes must not be empty")
        for size in self.sizes:
            if size % 2 == 0 or not 5 <= size <= 15:
                raise ConfigError(f"env.sizes entries must be odd and within [5, 15], got {size}")
        if not 0.0 <= self.loop_fraction <= 1.0:
            raise ConfigError(f"env.loop_fraction must lie in [0, 1], got {self.loop_fraction}")
        if self.step_limit < 1:
            raise ConfigError(f"env.step_limit must be >= 1, got {self.step_limit}")


@dataclass(frozen=True)
class AgentConfig:
    variant: str = "neural_map"
    embed_hidden: int = 256
    embed_dim: int = 32
    trunk_hidden: int = 256
    lstm_units: int = 128
    mqn_slots: int = 32
    pure_ot: bool = False
    lstm_head: bool = False
    activation: str = "relu"
    map: NeuralMapConfig = field(default_factory=NeuralMapConfig)

    def __post_init__(self) -> None:
        if self.variant not in AGENT_VARIANTS:
            raise ConfigError(f"agent.variant must be one of {AGENT_VARIANTS}, got {self.variant!r}")
        if self.activation not in ("relu", "tanh", "sigmoid"):
            raise ConfigError(f"agent.activation must be relu, tanh or sigmoid, got {self.activation!r}")
        if self.variant == "neural_map" and self.embed_dim != self.map.channels:
            raise ConfigError(
                f"agent.embed_dim ({self.embed_dim}) must equal agent.map.channels ({self.map.channels})"
            )
        if self.mqn_slots < 1:
            raise ConfigError(f"agent.mqn_slots must be >= 1, got {self.mqn_slots}")


@dataclass(frozen=True)
class TrainConfig:
    n_envs: int = 16
    rollout_length: int = 20
    gamma: float = 0.99
    learning_rate: float = 7e-4
    rmsprop_decay: float = 0.99
    rmsprop_epsilon: float = 1e-5
    max_grad_norm: float = 40.0
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    total_steps: int = 10_000_000
    eval_interval: int = 250_000
    eval_cap: int = 500
    eval_mazes: int = 100
    train_eval_mazes: int = 200
    metrics_window: int = 100

    def __post_init__(self) -> None:
        if self.n_envs < 1:
            raise ConfigError(f"train.n_envs must be >= 1, got {self.n_envs}")
        if self.rollout_length < 1:
            raise ConfigError(f"train.rollout_length must be >= 1, got {self.rollout_length}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"train.gamma must lie in (0, 1], got {self.gamma}")
        if self.total_steps < 0:
            raise ConfigError(f"train.total_steps must be >= 0, got {self.total_steps}")
        if self.eval_interval < 1 or self.eval_cap < 1:
            raise ConfigError("train.eval_interval and train.eval_cap must be >= 1")


@dataclass(frozen=True)
class PathsConfig:
    test_set: str = "data/test_mazes.jsonl"
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    agent: AgentConfig = field(default_factory=AgentConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self) -> None:
        m = self.agent.map
        largest = max(self.env.sizes)
        if self.agent.variant == "neural_map" and m.addressing == "absolute" and min(m.width, m.height) < largest:
            raise ConfigError(
                f"agent.map ({m.width}x{m.height}) is smaller than the largest maze in env.sizes ({largest}); "
                "absolute addressing needs one map cell per maze cell"
            )

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return _build(cls, data, "")


_NESTED: dict[type, dict[str, type]] = {
    RunConfig: {"agent": AgentConfig, "env": EnvConfig, "train": TrainConfig, "paths": PathsConfig},
    AgentConfig: {"map": NeuralMapConfig},
}


def _to_plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _build(cls: type, data: Mapping[str, Any], prefix: str) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix or '<root>'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, raw in data.items():
        dotted = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {dotted!r}")
        nested = _NESTED.get(cls, {}).get(key)
        if nested is not None:
            kwargs[key] = _build(nested, raw, f"{dotted}.")
        elif isinstance(raw, list):
            kwargs[key] = tuple(raw)
        else:
            kwargs[key] = raw
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or '<root>'}: {exc}") from exc


def load_run_config(path: Path) -> RunConfig:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def write_run_config(config: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8")


def with_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply {"train.total_steps": 2000, "agent.variant": "random", ...}; None values are skipped."""
    data = config.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = list(value) if isinstance(value, tuple) else value
    return RunConfig.from_dict(data)


def apply_seed_env(config: RunConfig, environ: Mapping[str, str] | None = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV_VAR)
    if raw is None or raw == "":
        return config
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc
    return dataclasses.replace(config, seed=seed)
