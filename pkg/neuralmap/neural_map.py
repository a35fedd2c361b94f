"""
The Neural Map: a C×H×W memory read globally by a conv stack, queried by soft
attention, and written sparsely at the agent's own cell.

Absolute mode writes at the agent's normalized position. Egocentric mode first
shifts the whole map against the agent's velocity and always writes the
centre cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Value
from .errors import ArgumentError, ConfigError

CONTEXT_VARIANTS = ("plain", "key_value")
WRITE_VARIANTS = ("hard", "gru")
ADDRESSING_VARIANTS = ("absolute", "egocentric")
READ_VARIANTS = ("global", "crop")

PREFIX = "map"


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3

    @property
    def vector(self) -> tuple[int, int]:
        return ((0, -1), (1, 0), (0, 1), (-1, 0))[self]

    def turned(self, clockwise_steps: int) -> "Heading":
        return Heading((self + clockwise_steps) % 4)


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: Heading = Heading.S


@dataclass(frozen=True)
class Velocity:
    u: int = 0
    v: int = 0


@dataclass(frozen=True)
class NeuralMapConfig:
    channels: int = 32
    height: int = 15
    width: int = 15
    context: str = "plain"
    write: str = "gru"
    addressing: str = "absolute"
    read: str = "global"
    crop_size: int = 5
    conv_channels: int = 8
    read_hidden: int = 256
    write_hidden: int = 256
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise ConfigError(f"map extents must be positive: C={self.channels} H={self.height} W={self.width}")
        for field, value, allowed in (
            ("context", self.context, CONTEXT_VARIANTS),
            ("write", self.write, WRITE_VARIANTS),
            ("addressing", self.addressing, ADDRESSING_VARIANTS),
            ("read", self.read, READ_VARIANTS),
            ("activation", self.activation, ("relu", "tanh", "sigmoid")),
        ):
            if value not in allowed:
                raise ConfigError(f"map.{field} must be one of {allowed}, got {value!r}")
        if self.context == "key_value" and self.channels % 2:
            raise ConfigError(f"key-value context needs an even channel count, got {self.channels}")
        if self.read == "crop" and (self.crop_size % 2 == 0 or self.crop_size > min(self.height, self.width)):
            raise ConfigError(f"crop window must be odd and fit the map, got {self.crop_size}")

    @property
    def center(self) -> tuple[int, int]:
        return self.width // 2, self.height // 2

    @property
    def context_dim(self) -> int:
        return self.channels // 2 if self.context == "key_value" else self.channels

    @property
    def output_dim(self) -> int:
        return 2 * self.channels + self.context_dim

    @property
    def read_extents(self) -> tuple[int, int]:
        if self.read == "crop":
            return self.crop_size, self.crop_size
        return self.height, self.width


@dataclass
class MapState:
    memory: Value

    @classmethod
    def zeros(cls, config: NeuralMapConfig) -> "MapState":
        return cls(Value(np.zeros((config.channels, config.height, config.width))))

    def detached(self) -> "MapState":
        return MapState(self.memory.detach())


@dataclass
class MapStepOutput:
    r: Value
    c: Value
    w: Value
    o: Value
    attention: np.ndarray
    new_map: MapState
    read_map: MapState
    position: tuple[int, int]


def normalize_coords(
    world_pos: tuple[float, float],
    world_extents: tuple[float, float],
    map_extents: tuple[int, int],
) -> tuple[int, int]:
    """Proportional rescale then floor, clamped into the map. Extents are (width, height)."""
    wx, wy = world_pos
    world_w, world_h = world_extents
    map_w, map_h = map_extents
    if not all(math.isfinite(v) for v in (wx, wy, world_w, world_h)):
        raise ArgumentError(f"non-finite coordinates {world_pos} in world {world_extents}")
    if world_w <= 0 or world_h <= 0:
        raise ArgumentError(f"world extents must be positive, got {world_extents}")
    x = math.floor(wx * map_w / world_w)
    y = math.floor(wy * map_h / world_h)
    return min(max(x, 0), map_w - 1), min(max(y, 0), map_h - 1)


def build_map_parameters(store: ParameterStore, config: NeuralMapConfig, rng: np.random.Generator) -> None:
    c = config.channels
    k = config.conv_channels
    read_h, read_w = config.read_extents
    store.add_conv(f"{PREFIX}/read/conv1", c, k, rng)
    store.add_conv(f"{PREFIX}/read/conv2", k, k, rng)
    store.add_conv(f"{PREFIX}/read/conv3", k, k, rng)
    store.add_linear(f"{PREFIX}/read/fc1", k * read_h * read_w, config.read_hidden, rng)
    store.add_linear(f"{PREFIX}/read/fc2", config.read_hidden, c, rng)

    store.add(f"{PREFIX}/context/query", ad.glorot_uniform(rng, (2 * c, config.context_dim), 2 * c, config.context_dim))

    write_in = 3 * c + config.context_dim
    if config.write == "hard":
        store.add_linear(f"{PREFIX}/write/fc1", write_in, config.write_hidden, rng)
        store.add_linear(f"{PREFIX}/write/fc2", config.write_hidden, c, rng)
    else:
        store.add_linear(f"{PREFIX}/write/reset", write_in, c, rng)
        store.add_linear(f"{PREFIX}/write/update", write_in, c, rng, bias=-1.0)
        store.add_linear(f"{PREFIX}/write/candidate", write_in - c, c, rng)
        store.add(f"{PREFIX}/write/candidate_recurrent", ad.orthogonal(rng, c))


def global_read(
    state: MapState,
    params: ParameterStore,
    config: NeuralMapConfig,
    center: tuple[int, int] | None = None,
) -> Value:
    memory = state.memory
    if config.read == "crop":
        memory = ad.crop2d(memory, center if center is not None else config.center, config.crop_size)
    act = ad.activation(config.activation)
    h = act(params.conv(f"{PREFIX}/read/conv1", memory))
    h = act(params.conv(f"{PREFIX}/read/conv2", h))
    h = act(params.conv(f"{PREFIX}/read/conv3", h))
    h = act(params.linear(f"{PREFIX}/read/fc1", ad.reshape(h, (h.size,))))
    return params.linear(f"{PREFIX}/read/fc2", h)


def context_read(
    state: MapState,
    s: Value,
    r: Value,
    params: ParameterStore,
    config: NeuralMapConfig,
) -> tuple[Value, Value]:
    """Soft-attention lookup; returns (c_t, α_t)."""
    if config.context == "key_value" and config.channels % 2:
        raise ConfigError(f"key-value context needs an even channel count, got {config.channels}")
    query = ad.project(ad.concat([s, r]), params[f"{PREFIX}/context/query"])
    memory = state.memory
    if config.context == "key_value":
        half = config.channels // 2
        keys = ad.slice_(memory, 0, half)
        values = ad.slice_(memory, half, config.channels)
    else:
        keys = values = memory
    attention = ad.softmax_positions(ad.channel_dot(keys, query))
    return ad.weighted_sum(values, attention), attention


def hard_write(
    s: Value,
    r: Value,
    c: Value,
    m_xy: Value,
    params: ParameterStore,
    config: NeuralMapConfig,
) -> Value:
    act = ad.activation(config.activation)
    hidden = act(params.linear(f"{PREFIX}/write/fc1", ad.concat([s, r, c, m_xy])))
    return params.linear(f"{PREFIX}/write/fc2", hidden)


def gru_write(
    s: Value,
    r: Value,
    c: Value,
    m_xy: Value,
    params: ParameterStore,
    config: NeuralMapConfig,
) -> Value:
    """w = (1 − ẑ) ⊙ m + ẑ ⊙ ŵ with reset gate r̂ feeding the candidate ŵ."""
    full = ad.concat([s, r, c, m_xy])
    reset = ad.sigmoid(params.linear(f"{PREFIX}/write/reset", full))
    candidate = ad.tanh(
        ad.add(
            params.linear(f"{PREFIX}/write/candidate", ad.concat([s, r, c])),
            ad.project(ad.mul(reset, m_xy), params[f"{PREFIX}/write/candidate_recurrent"]),
        )
    )
    update_gate = ad.sigmoid(params.linear(f"{PREFIX}/write/update", full))
    keep = ad.sub(ad.constant(np.ones(config.channels)), update_gate)
    return ad.add(ad.mul(keep, m_xy), ad.mul(update_gate, candidate))


def update(state: MapState, pos: tuple[int, int], w: Value) -> MapState:
    return MapState(ad.scatter_write(state.memory, pos, w))


def counter_transform(state: MapState, velocity: Velocity) -> MapState:
    return MapState(ad.shift2d(state.memory, (-velocity.u, -velocity.v)))


def ego_update(state: MapState, w: Value, center: tuple[int, int]) -> MapState:
    return MapState(ad.scatter_write(state.memory, center, w))


def map_step(
    state: MapState,
    s: Value,
    config: NeuralMapConfig,
    params: ParameterStore,
    pose: Pose | None = None,
    velocity: Velocity | None = None,
) -> MapStepOutput:
    if config.addressing == "absolute":
        if pose is None:
            raise ConfigError("absolute addressing needs a Pose")
        read_map = state
        position = (pose.x, pose.y)
    else:
        if velocity is None:
            raise ConfigError("egocentric addressing needs a Velocity")
        read_map = counter_transform(state, velocity)
        position = config.center

    r = global_read(read_map, params, config, center=position)
    c, attention = context_read(read_map, s, r, params, config)
    m_xy = ad.column(read_map.memory, position)
    write = gru_write if config.write == "gru" else hard_write
    w = write(s, r, c, m_xy, params, config)
    if config.addressing == "absolute":
        new_map = update(read_map, position, w)
    else:
        new_map = ego_update(read_map, w, position)
    return MapStepOutput(
        r=r,
        c=c,
        w=w,
        o=ad.concat([r, c, w]),
        attention=attention.data.copy(),
        new_map=new_map,
        read_map=read_map,
        position=position,
    )


class NeuralMap:
    """Parameters plus configuration; episode state lives in MapState values."""

    def __init__(self, config: NeuralMapConfig, params: ParameterStore, rng: np.random.Generator) -> None:
        self.config = config
        self.params = params
        build_map_parameters(params, config, rng)

    def initial_state(self) -> MapState:
        return MapState.zeros(self.config)

    def step(
        self,
        state: MapState,
        s: Value,
        pose: Pose | None = None,
        velocity: Velocity | None = None,
    ) -> MapStepOutput:
        return map_step(state, s, self.config, self.params, pose=pose, velocity=velocity)


# ── heatmap export ───────────────────────────────────────────────────────────


@dataclass(frozen=True)
class HeatmapRow:
    step: int
    pose_x: int
    pose_y: int
    attention: np.ndarray


def write_heatmap(path: Path, rows: Iterable[HeatmapRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step,pose_x,pose_y"]
    for row in rows:
        values = ",".join(f"{a:.6g}" for a in np.asarray(row.attention, dtype=np.float64).reshape(-1))
        lines.append(f"{row.step},{row.pose_x},{row.pose_y},{values}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_heatmap(path: Path, extents: tuple[int, int]) -> list[HeatmapRow]:
    height, width = extents
    rows: list[HeatmapRow] = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        attention = np.array([float(v) for v in parts[3:]]).reshape(height, width)
        rows.append(HeatmapRow(step=int(parts[0]), pose_x=int(parts[1]), pose_y=int(parts[2]), attention=attention))
    return rows
