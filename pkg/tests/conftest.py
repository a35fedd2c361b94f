from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from neuralmap.config import AgentConfig, EnvConfig, PathsConfig, RunConfig, TrainConfig
from neuralmap.maze_env import MazeSpec, build_test_set, write_maze_set
from neuralmap.neural_map import NeuralMapConfig


def tiny_map_config(**overrides) -> NeuralMapConfig:
    params = dict(channels=4, height=7, width=7, conv_channels=2, read_hidden=8, write_hidden=8)
    params.update(overrides)
    return NeuralMapConfig(**params)


def tiny_agent_config(variant: str = "neural_map", **overrides) -> AgentConfig:
    map_overrides = overrides.pop("map", {})
    params = dict(
        variant=variant,
        embed_hidden=16,
        embed_dim=4,
        trunk_hidden=16,
        lstm_units=8,
        map=tiny_map_config(**map_overrides),
    )
    params.update(overrides)
    return AgentConfig(**params)


def tiny_run_config(tmp_path: Path, variant: str = "neural_map", total_steps: int = 40, seed: int = 0) -> RunConfig:
    test_set = tmp_path / "test_mazes.jsonl"
    if not test_set.exists():
        write_maze_set(test_set, build_test_set(4, np.random.default_rng(99), sizes=(5, 7)))
    return RunConfig(
        seed=seed,
        agent=tiny_agent_config(variant),
        env=EnvConfig(sizes=(5, 7)),
        train=TrainConfig(
            n_envs=2,
            rollout_length=5,
            learning_rate=1e-3,
            total_steps=total_steps,
            eval_interval=20,
            eval_cap=30,
            eval_mazes=2,
            train_eval_mazes=2,
        ),
        paths=PathsConfig(test_set=str(test_set), out_dir=str(tmp_path / "run")),
    )




def open_room(size: int = 7) -> list[str]:
    rows = ["#" * size]
    rows += ["#" + "." * (size - 2) + "#" for _ in range(size - 2)]
    rows.append("#" * size)
    return rows


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def room_maze() -> MazeSpec:
    return MazeSpec.build(open_room(7), start=(3, 1), indicator=(3, 2), goal_red=(1, 5), goal_teal=(5, 5))
