from __future__ import annotations

from typing import get_type_hints

import numpy as np
import pytest

from neuralmap import autodiff as ad
from neuralmap.agents import (
    AGENT_TYPES,
    LSTMCarry,
    LSTMState,
    MQNCarry,
    NeuralMapCarry,
    OracleAgent,
    RandomAgent,
    build_agent,
    build_mqn,
    embed_observation,
    mqn_lookup,
)
from neuralmap.autodiff import ParameterStore, Value
from neuralmap.errors import AgentStateError, BoundsError, DimensionError
from neuralmap.maze_env import Action, IndicatorColor, generate_maze, reset, step
from neuralmap.neural_map import Heading, Pose, Velocity

from .conftest import tiny_agent_config


def _obs(rng: np.random.Generator) -> np.ndarray:
    return (rng.random((5, 15, 3)) < 0.2).astype(np.uint8)


def test_embedding_shape_and_zero_input(rng) -> None:
    agent = build_agent(tiny_agent_config("lstm"), rng)
    zero = np.zeros((5, 15, 3), dtype=np.uint8)
    a = embed_observation(zero, agent.params)
    b = embed_observation(zero, agent.params)
    assert a.shape == (4,)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(DimensionError):
        embed_observation(np.zeros((5, 3, 15)), agent.params)


def test_full_scale_embedding_has_thirty_two_channels(rng) -> None:
    agent = build_agent(tiny_agent_config("mqn", embed_dim=32, embed_hidden=256), rng)
    assert embed_observation(_obs(rng), agent.params).shape == (32,)


@pytest.mark.parametrize("variant", ["neural_map", "lstm", "mqn"])
def test_learned_agents_produce_normalized_policy(variant, rng) -> None:
    agent = build_agent(tiny_agent_config(variant), rng)
    carry = agent.initial_carry()
    pose = Pose(1, 1, Heading.S)
    for _ in range(3):
        action, out, carry = agent.act(carry, _obs(rng), pose, Velocity(0, 0), rng)
        assert action in (0, 1, 2)
        assert out.logits.shape == (3,)
        assert out.value.shape == (1,)
        assert out.probabilities().sum() == pytest.approx(1.0, abs=1e-6)
        assert np.isfinite(out.value.data).all()


def test_identical_seed_gives_identical_action() -> None:
    def run() -> list[int]:
        agent = build_agent(tiny_agent_config("neural_map"), np.random.default_rng(3))
        rng = np.random.default_rng(4)
        obs_rng = np.random.default_rng(5)
        carry = agent.initial_carry()
        actions = []
        for t in range(6):
            action, _, carry = agent.act(carry, _obs(obs_rng), Pose(t % 5, 2), Velocity(0, 0), rng)
            actions.append(action)
        return actions

    assert run() == run()


def test_carry_of_wrong_variant_is_rejected(rng) -> None:
    agent = build_agent(tiny_agent_config("lstm"), rng)
    with pytest.raises(AgentStateError):
        agent.act(MQNCarry(), _obs(rng), Pose(1, 1), Velocity(), rng)


def test_random_agent_is_uniform() -> None:
    agent = RandomAgent(tiny_agent_config("random"), np.random.default_rng(0))
    assert not agent.trainable
    rng = np.random.default_rng(1)
    carry = agent.initial_carry()
    obs = np.zeros((5, 15, 3), dtype=np.uint8)
    counts = np.zeros(3)
    for _ in range(30_000):
        action, _, carry = agent.act(carry, obs, Pose(1, 1), Velocity(), rng, greedy=True)
        counts[action] += 1
    np.testing.assert_allclose(counts / counts.sum(), 1 / 3, atol=0.02)


def test_mqn_lookup_weights() -> None:
    rng = np.random.default_rng(2)
    store = ParameterStore()
    build_mqn(store, 4, rng)
    current = Value(rng.normal(size=4))
    features, weights = mqn_lookup((current,), current, store)
    np.testing.assert_array_equal(weights, [1.0])
    assert features.shape == (8,)
    twin = Value(rng.normal(size=4))
    _, weights = mqn_lookup((twin, Value(twin.data)), current, store)
    np.testing.assert_allclose(weights, [0.5, 0.5])
    buffer = tuple(Value(rng.normal(size=4)) for _ in range(32))
    _, weights = mqn_lookup(buffer, current, store)
    assert weights.sum() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(AgentStateError):
        mqn_lookup((), current, store)


def test_mqn_buffer_keeps_latest_slots(rng) -> None:
    agent = build_agent(tiny_agent_config("mqn", mqn_slots=5), rng)
    carry = agent.initial_carry()
    embeddings = []
    for _ in range(9):
        _, out, carry = agent.act(carry, _obs(rng), Pose(1, 1), Velocity(), rng)
        embeddings.append(out.embedding)
        assert len(carry.buffer) <= 5
    assert carry.buffer == tuple(embeddings[-5:])


def test_lstm_carry_stays_finite_over_long_episode(rng) -> None:
    agent = build_agent(tiny_agent_config("lstm"), rng)
    carry = agent.initial_carry()
    for _ in range(500):
        _, _, carry = agent.act(carry, _obs(rng), Pose(1, 1), Velocity(), rng)
        carry = agent.detach_carry(carry)
    assert isinstance(carry, LSTMCarry)
    assert np.isfinite(carry.state.h.data).all()
    assert np.isfinite(carry.state.c.data).all()
    assert np.abs(carry.state.h.data).max() <= 1.0


def test_neural_map_carry_writes_only_visited_cells() -> None:
    rng = np.random.default_rng(9)
    agent = build_agent(tiny_agent_config("neural_map"), rng)
    maze = generate_maze(7, rng)
    state, obs = reset(maze, rng)
    carry = agent.initial_carry(state)
    visited = set()
    for _ in range(30):
        visited.add((state.pose.x, state.pose.y))
        action, _, carry = agent.act(carry, obs, state.pose, state.last_velocity, rng)
        result = step(state, action)
        state, obs = result.state, result.observation
        if result.done:
            break
    memory = carry.map.memory.data
    written = {(int(x), int(y)) for y, x in zip(*np.nonzero(np.any(memory != 0, axis=0)), strict=True)}
    assert written <= visited


def test_hybrid_head_and_pure_output_variants(rng) -> None:
    hybrid = build_agent(tiny_agent_config("neural_map", lstm_head=True), rng)
    assert "head_lstm/recurrent" in hybrid.params
    carry = hybrid.initial_carry()
    assert isinstance(carry, NeuralMapCarry) and isinstance(carry.head, LSTMState)
    _, _, carry = hybrid.act(carry, _obs(rng), Pose(2, 2), Velocity(), rng)
    assert carry.head.h.shape == (8,)

    pure = build_agent(tiny_agent_config("neural_map", pure_ot=True), rng)
    mixed = build_agent(tiny_agent_config("neural_map"), rng)
    assert pure.params["trunk/fc/weight"].shape[0] == 12
    assert mixed.params["trunk/fc/weight"].shape[0] == 16


def test_policy_gradient_reaches_embedding_parameters(rng) -> None:
    agent = build_agent(tiny_agent_config("neural_map", activation="tanh", map={"activation": "tanh"}), rng)
    carry = agent.initial_carry()
    _, out, _ = agent.act(carry, _obs(rng), Pose(3, 3), Velocity(), rng)
    ad.backward(ad.pick(out.log_probs(), 0))
    assert np.abs(agent.params["embed/fc1/weight"].grad).sum() > 0


def test_oracle_reaches_correct_goal() -> None:
    rng = np.random.default_rng(13)
    agent = OracleAgent(tiny_agent_config("oracle"), rng)
    for size in (7, 11, 15):
        maze = generate_maze(size, rng)
        for color in IndicatorColor:
            state, obs = reset(maze, rng, color, step_limit=500)
            carry = agent.initial_carry(state)
            result = None
            while result is None or not result.done:
                action, _, carry = agent.act(carry, obs, state.pose, state.last_velocity, rng, greedy=True)
                result = step(state, action)
                state, obs = result.state, result.observation
            assert result.reward == 1.0


def test_oracle_turns_towards_path() -> None:
    agent = OracleAgent(tiny_agent_config("oracle"), np.random.default_rng(0))
    maze = generate_maze(7, np.random.default_rng(1))
    state, _ = reset(maze, np.random.default_rng(2), IndicatorColor.GREEN)
    assert agent.next_action(state, maze.start) in (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)
    with pytest.raises(AgentStateError):
        agent.initial_carry()


def test_every_variant_is_registered() -> None:
    assert set(AGENT_TYPES) == {"neural_map", "lstm", "mqn", "random", "oracle"}


def test_policy_overrides_are_fully_annotated() -> None:
    for cls in AGENT_TYPES.values():
        hints = get_type_hints(cls.policy)
        assert set(hints) == {"carry", "obs", "pose", "velocity", "return"}, cls.__name__
        assert hints["pose"] is Pose and hints["velocity"] is Velocity


def test_neural_map_agent_rejects_cells_beyond_the_map(rng) -> None:
    agent = build_agent(tiny_agent_config("neural_map"), rng)
    width, height = agent.world_extents
    assert agent.map_pose(Pose(width - 1, height - 1)) == Pose(width - 1, height - 1)
    for x, y in ((width, 0), (width + 1, height + 1), (width + 5, height + 5)):
        with pytest.raises(BoundsError):
            agent.map_pose(Pose(x, y))
    agent.check_maze(generate_maze(7, rng))
    with pytest.raises(BoundsError):
        agent.check_maze(generate_maze(9, rng))
    build_agent(tiny_agent_config("lstm"), rng).check_maze(generate_maze(15, rng))
    ego = build_agent(tiny_agent_config("neural_map", map={"addressing": "egocentric"}), rng)
    ego.check_maze(generate_maze(15, rng))
