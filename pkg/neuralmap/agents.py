"""
Policy/value agents sharing one interface.

Every agent exposes `initial_carry(episode)`, `policy(carry, obs, pose, velocity)`
and `act(carry, obs, pose, velocity, rng, greedy)`, so the trainer and the
evaluator never branch on the variant:

  neural_map  observation embedding -> Neural Map step -> trunk on [o_t, s_t]
  lstm        observation embedding -> LSTM (128 units) -> trunk
  mqn         observation embedding -> attention over the last 32 embeddings -> trunk
  random      uniform over the three actions
  oracle      privileged shortest-path walker (reads the maze and indicator colour)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import softmax

from . import autodiff as ad
from .autodiff import ParameterStore, Value
from .config import AgentConfig
from .errors import AgentStateError, BoundsError, DimensionError
from .maze_env import N_ACTIONS, OBS_CHANNELS, VIEW_DEPTH, VIEW_WIDTH, Action, EnvState, MazeSpec, bfs_path
from .neural_map import Heading, MapState, NeuralMap, Pose, Velocity, normalize_coords

OBS_SHAPE = (OBS_CHANNELS, VIEW_DEPTH, VIEW_WIDTH)
OBS_SIZE = OBS_CHANNELS * VIEW_DEPTH * VIEW_WIDTH


@dataclass
class PolicyOutput:
    logits: Value
    value: Value
    embedding: Value | None = None
    attention: np.ndarray | None = None

    def log_probs(self) -> Value:
        return ad.log_softmax(self.logits)

    def probabilities(self) -> np.ndarray:
        return softmax(self.logits.data.astype(np.float64))


# ── carries ──────────────────────────────────────────────────────────────────


@dataclass
class LSTMState:
    h: Value
    c: Value

    @classmethod
    def zeros(cls, units: int) -> "LSTMState":
        return cls(Value(np.zeros(units)), Value(np.zeros(units)))

    def detached(self) -> "LSTMState":
        return LSTMState(self.h.detach(), self.c.detach())


@dataclass
class NeuralMapCarry:
    map: MapState
    head: LSTMState | None = None


@dataclass
class LSTMCarry:
    state: LSTMState


@dataclass
class MQNCarry:
    buffer: tuple[Value, ...] = ()


@dataclass
class RandomCarry:
    pass


@dataclass
class OracleCarry:
    episode: EnvState


AgentCarry = Union[NeuralMapCarry, LSTMCarry, MQNCarry, RandomCarry, OracleCarry]


# ── shared building blocks ───────────────────────────────────────────────────


def build_embedding(store: ParameterStore, config: AgentConfig, rng: np.random.Generator) -> None:
    store.add_linear("embed/fc1", OBS_SIZE, config.embed_hidden, rng)
    store.add_linear("embed/fc2", config.embed_hidden, config.embed_dim, rng)


def embed_observation(obs: np.ndarray | Value, params: ParameterStore, activation: str = "relu") -> Value:
    """Flatten the 5×15×3 view, linear-256, nonlinearity, linear-32 -> s_t."""
    x = obs if isinstance(obs, Value) else Value(obs)
    if x.shape != OBS_SHAPE:
        raise DimensionError(f"observation shape {x.shape}, expected {OBS_SHAPE}")
    hidden = ad.activation(activation)(params.linear("embed/fc1", ad.reshape(x, (OBS_SIZE,))))
    return params.linear("embed/fc2", hidden)


def build_trunk(store: ParameterStore, n_in: int, config: AgentConfig, rng: np.random.Generator) -> None:
    store.add_linear("trunk/fc", n_in, config.trunk_hidden, rng)
    store.add_linear("policy/logits", config.trunk_hidden, N_ACTIONS, rng)
    store.add_linear("value/head", config.trunk_hidden, 1, rng)


def policy_trunk(features: Value, params: ParameterStore, activation: str = "relu") -> tuple[Value, Value]:
    hidden = ad.activation(activation)(params.linear("trunk/fc", features))
    return params.linear("policy/logits", hidden), params.linear("value/head", hidden)


def build_lstm(store: ParameterStore, prefix: str, n_in: int, units: int, rng: np.random.Generator) -> None:
    store.add_linear(f"{prefix}/input", n_in, 4 * units, rng)
    store.add(f"{prefix}/recurrent", np.concatenate([ad.orthogonal(rng, units) for _ in range(4)], axis=1))


def lstm_cell(params: ParameterStore, prefix: str, x: Value, state: LSTMState) -> LSTMState:
    """Gates laid out [input | forget | cell | output] along the 4·units axis."""
    units = state.h.size
    gates = ad.add(params.linear(f"{prefix}/input", x), ad.project(state.h, params[f"{prefix}/recurrent"]))
    i = ad.sigmoid(ad.slice_(gates, 0, units))
    f = ad.sigmoid(ad.slice_(gates, units, 2 * units))
    g = ad.tanh(ad.slice_(gates, 2 * units, 3 * units))
    o = ad.sigmoid(ad.slice_(gates, 3 * units, 4 * units))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    return LSTMState(h=ad.mul(o, ad.tanh(c)), c=c)


def build_mqn(store: ParameterStore, dim: int, rng: np.random.Generator) -> None:
    for name in ("key", "value", "query"):
        store.add(f"mqn/{name}", ad.glorot_uniform(rng, (dim, dim), dim, dim))


def mqn_lookup(buffer: tuple[Value, ...], current: Value, params: ParameterStore) -> tuple[Value, np.ndarray]:
    """Soft attention of the current embedding over the buffered ones; returns ([read, current], weights)."""
    if not buffer:
        raise AgentStateError("mqn_lookup on an empty memory buffer")
    dim = current.size
    memory = ad.concat([ad.reshape(e, (1, dim)) for e in buffer], axis=0)
    keys = ad.matmul(memory, params["mqn/key"])
    values = ad.matmul(memory, params["mqn/value"])
    query = ad.project(current, params["mqn/query"])
    scores = ad.reshape(ad.matmul(keys, ad.reshape(query, (dim, 1))), (len(buffer),))
    weights = ad.softmax(scores)
    read = ad.reshape(ad.matmul(ad.reshape(weights, (1, len(buffer))), values), (dim,))
    return ad.concat([read, current]), weights.data.copy()


def _constant_output(logits: np.ndarray) -> PolicyOutput:
    return PolicyOutput(logits=ad.constant(logits), value=ad.constant(np.zeros(1)))


# ── agents ───────────────────────────────────────────────────────────────────


class Agent:
    variant = "base"
    carry_type: type = RandomCarry

    def __init__(self, config: AgentConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.params = ParameterStore()

    @property
    def trainable(self) -> bool:
        return len(self.params) > 0

    def initial_carry(self, episode: EnvState | None = None) -> AgentCarry:
        raise NotImplementedError

    def policy(
        self,
        carry: AgentCarry,
        obs: np.ndarray,
        pose: Pose,
        velocity: Velocity,
    ) -> tuple[PolicyOutput, AgentCarry]:
        raise NotImplementedError

    def check_maze(self, maze: MazeSpec) -> None:
        """Raise BoundsError if this agent cannot run on `maze`."""

    def detach_carry(self, carry: AgentCarry) -> AgentCarry:
        return carry

    def _check_carry(self, carry: AgentCarry) -> None:
        if not isinstance(carry, self.carry_type):
            raise AgentStateError(
                f"{self.variant} agent got a {type(carry).__name__}, expected {self.carry_type.__name__}"
            )

    def act(
        self,
        carry: AgentCarry,
        obs: np.ndarray,
        pose: Pose,
        velocity: Velocity,
        rng: np.random.Generator,
        greedy: bool = False,
    ) -> tuple[int, PolicyOutput, AgentCarry]:
        out, carry = self.policy(carry, obs, pose, velocity)
        probs = out.probabilities()
        if greedy:
            action = int(np.argmax(probs))
        else:
            action = int(rng.choice(len(probs), p=probs / probs.sum()))
        return action, out, carry


class NeuralMapAgent(Agent):
    variant = "neural_map"
    carry_type = NeuralMapCarry

    def __init__(self, config: AgentConfig, rng: np.random.Generator) -> None:
        super().__init__(config, rng)
        build_embedding(self.params, config, rng)
        self.memory = NeuralMap(config.map, self.params, rng)
        n_features = config.map.output_dim + (0 if config.pure_ot else config.embed_dim)
        if config.lstm_head:
            build_lstm(self.params, "head_lstm", n_features, config.lstm_units, rng)
            n_features = config.lstm_units
        build_trunk(self.params, n_features, config, rng)

    @property
    def absolute(self) -> bool:
        return self.config.map.addressing == "absolute"

    @property
    def world_extents(self) -> tuple[int, int]:
        # 1:1 world-to-map scale
        return self.config.map.width, self.config.map.height

    def check_maze(self, maze: MazeSpec) -> None:
        width, height = self.world_extents
        if self.absolute and maze.size > min(width, height):
            raise BoundsError(
                f"maze {maze.id} is {maze.size}x{maze.size} but the map holds only {width}x{height} cells"
            )

    def map_pose(self, pose: Pose) -> Pose:
        width, height = self.world_extents
        if self.absolute and not (0 <= pose.x < width and 0 <= pose.y < height):
            raise BoundsError(f"pose ({pose.x}, {pose.y}) lies outside the {width}x{height} map")
        x, y = normalize_coords(
            (float(pose.x), float(pose.y)),
            self.world_extents,
            (self.config.map.width, self.config.map.height),
        )
        return Pose(x, y, pose.heading)

    def initial_carry(self, episode: EnvState | None = None) -> NeuralMapCarry:
        head = LSTMState.zeros(self.config.lstm_units) if self.config.lstm_head else None
        return NeuralMapCarry(map=self.memory.initial_state(), head=head)

    def policy(
        self,
        carry: NeuralMapCarry,
        obs: np.ndarray,
        pose: Pose,
        velocity: Velocity,
    ) -> tuple[PolicyOutput, NeuralMapCarry]:
        self._check_carry(carry)
        activation = self.config.activation
        s = embed_observation(obs, self.params, activation)
        step = self.memory.step(carry.map, s, pose=self.map_pose(pose), velocity=velocity)
        features = step.o if self.config.pure_ot else ad.concat([step.o, s])
        head = carry.head
        if head is not None:
            head = lstm_cell(self.params, "head_lstm", features, head)
            features = head.h
        logits, value = policy_trunk(features, self.params, activation)
        out = PolicyOutput(logits=logits, value=value, embedding=s, attention=step.attention)
        return out, NeuralMapCarry(map=step.new_map, head=head)

    def detach_carry(self, carry: NeuralMapCarry) -> NeuralMapCarry:
        return NeuralMapCarry(
            map=carry.map.detached(),
            head=carry.head.detached() if carry.head is not None else None,
        )


class LSTMAgent(Agent):
    variant = "lstm"
    carry_type = LSTMCarry

    def __init__(self, config: AgentConfig, rng: np.random.Generator) -> None:
        super().__init__(config, rng)
        build_embedding(self.params, config, rng)
        build_lstm(self.params, "lstm", config.embed_dim, config.lstm_units, rng)
        build_trunk(self.params, config.lstm_units, config, rng)

    def initial_carry(self, episode: EnvState | None = None) -> LSTMCarry:
        return LSTMCarry(LSTMState.zeros(self.config.lstm_units))

    def policy(
        self,
        carry: LSTMCarry,
        obs: np.ndarray,
        pose: Pose,
        velocity: Velocity,
    ) -> tuple[PolicyOutput, LSTMCarry]:
        self._check_carry(carry)
        s = embed_observation(obs, self.params, self.config.activation)
        state = lstm_cell(self.params, "lstm", s, carry.state)
        logits, value = policy_trunk(state.h, self.params, self.config.activation)
        return PolicyOutput(logits=logits, value=value, embedding=s), LSTMCarry(state)

    def detach_carry(self, carry: LSTMCarry) -> LSTMCarry:
        return LSTMCarry(carry.state.detached())


class MQNAgent(Agent):
    variant = "mqn"
    carry_type = MQNCarry

    def __init__(self, config: AgentConfig, rng: np.random.Generator) -> None:
        super().__init__(config, rng)
        build_embedding(self.params, config, rng)
        build_mqn(self.params, config.embed_dim, rng)
        build_trunk(self.params, 2 * config.embed_dim, config, rng)

    def initial_carry(self, episode: EnvState | None = None) -> MQNCarry:
        return MQNCarry()

    def policy(
        self,
        carry: MQNCarry,
        obs: np.ndarray,
        pose: Pose,
        velocity: Velocity,
    ) -> tuple[PolicyOutput, MQNCarry]:
        self._check_carry(carry)
        s = embed_observation(obs, self.params, self.config.activation)
        buffer = (carry.buffer + (s,))[-self.config.mqn_slots :]
        features, weights = mqn_lookup(buffer, s, self.params)
        logits, value = policy_trunk(features, self.params, self.config.activation)
        out = PolicyOutput(logits=logits, value=value, embedding=s, attention=weights)
        return out, MQNCarry(buffer)

    def detach_carry(self, carry: MQNCarry) -> MQNCarry:
        return MQNCarry(tuple(e.detach() for e in carry.buffer))


class RandomAgent(Agent):
    variant = "random"
    carry_type = RandomCarry

    def initial_carry(self, episode: EnvState | None = None) -> RandomCarry:
        return RandomCarry()

    def policy(
        self,
        carry: RandomCarry,
        obs: np.ndarray,
        pose: Pose,
        velocity: Velocity,
    ) -> tuple[PolicyOutput, RandomCarry]:
        self._check_carry(carry)
        return _constant_output(np.zeros(N_ACTIONS)), carry

    def act(
        self,
        carry: RandomCarry,
        obs: np.ndarray,
        pose: Pose,
        velocity: Velocity,
        rng: np.random.Generator,
        greedy: bool = False,
    ) -> tuple[int, PolicyOutput, RandomCarry]:
        # sampled even when greedy: argmax of uniform logits would always pick forward
        out, carry = self.policy(carry, obs, pose, velocity)
        return int(rng.integers(N_ACTIONS)), out, carry


_ORACLE_MARGIN = 50.0


class OracleAgent(Agent):
    """Walks the shortest path to the correct goal that avoids the wrong one."""

    variant = "oracle"
    carry_type = OracleCarry

    def initial_carry(self, episode: EnvState | None = None) -> OracleCarry:
        if episode is None:
            raise AgentStateError("oracle agent needs the episode state at reset")
        return OracleCarry(episode)

    def next_action(self, episode: EnvState, pose: Pose) -> Action:
        maze = episode.maze
        goal = maze.goal_for(episode.indicator_color)
        path = bfs_path(maze, (pose.x, pose.y), goal, frozenset({maze.wrong_goal_for(episode.indicator_color)}))
        if path is None or len(path) < 2:
            return Action.FORWARD
        dx, dy = path[1][0] - pose.x, path[1][1] - pose.y
        wanted = next(h for h in Heading if h.vector == (dx, dy))
        turn = (wanted - Heading(pose.heading)) % 4
        if turn == 0:
            return Action.FORWARD
        return Action.TURN_LEFT if turn == 3 else Action.TURN_RIGHT

    def policy(
        self,
        carry: OracleCarry,
        obs: np.ndarray,
        pose: Pose,
        velocity: Velocity,
    ) -> tuple[PolicyOutput, OracleCarry]:
        self._check_carry(carry)
        logits = np.full(N_ACTIONS, -_ORACLE_MARGIN)
        logits[self.next_action(carry.episode, pose)] = 0.0
        return _constant_output(logits), carry


AGENT_TYPES: dict[str, type[Agent]] = {
    "neural_map": NeuralMapAgent,
    "lstm": LSTMAgent,
    "mqn": MQNAgent,
    "random": RandomAgent,
    "oracle": OracleAgent,
}


def build_agent(config: AgentConfig, rng: np.random.Generator) -> Agent:
    return AGENT_TYPES[config.variant](config, rng)
