from __future__ import annotations

import numpy as np
import pytest

from neuralmap import autodiff as ad
from neuralmap.autodiff import ParameterStore, Value
from neuralmap.errors import ArgumentError, BoundsError, ConfigError
from neuralmap.neural_map import (
    ADDRESSING_VARIANTS,
    CONTEXT_VARIANTS,
    WRITE_VARIANTS,
    HeatmapRow,
    MapState,
    NeuralMap,
    NeuralMapConfig,
    Pose,
    Velocity,
    context_read,
    counter_transform,
    ego_update,
    global_read,
    gru_write,
    hard_write,
    normalize_coords,
    read_heatmap,
    update,
    write_heatmap,
)

from .conftest import tiny_map_config


def _build(config: NeuralMapConfig, seed: int = 0) -> NeuralMap:
    return NeuralMap(config, ParameterStore(), np.random.default_rng(seed))


def _random_state(config: NeuralMapConfig, rng: np.random.Generator) -> MapState:
    return MapState(Value(rng.normal(size=(config.channels, config.height, config.width))))


def _vec(rng: np.random.Generator, n: int) -> Value:
    return Value(rng.normal(size=n))


def _naive_shift(arr: np.ndarray, du: int, dv: int) -> np.ndarray:
    out = np.zeros_like(arr)
    _, height, width = arr.shape
    for y in range(height):
        for x in range(width):
            if 0 <= x + du < width and 0 <= y + dv < height:
                out[:, y + dv, x + du] = arr[:, y, x]
    return out


def _changed_columns(before: np.ndarray, after: np.ndarray) -> set[tuple[int, int]]:
    diff = np.any(before != after, axis=0)
    return {(int(x), int(y)) for y, x in zip(*np.nonzero(diff), strict=True)}


# ── configuration and coordinates ────────────────────────────────────────────


def test_config_rejects_odd_key_value_channels() -> None:
    with pytest.raises(ConfigError):
        NeuralMapConfig(channels=5, context="key_value")
    with pytest.raises(ConfigError):
        NeuralMapConfig(write="lstm")
    with pytest.raises(ConfigError):
        NeuralMapConfig(height=7, width=7, read="crop", crop_size=4)


def test_output_dim_by_context_variant() -> None:
    assert NeuralMapConfig().output_dim == 96
    assert NeuralMapConfig(context="key_value").output_dim == 80
    assert NeuralMapConfig().center == (7, 7)


def test_normalize_coords_examples() -> None:
    assert normalize_coords((0, 0), (15, 15), (15, 15)) == (0, 0)
    assert normalize_coords((14, 14), (15, 15), (15, 15)) == (14, 14)
    assert normalize_coords((7.9, 3.2), (16, 16), (8, 8)) == (3, 1)
    assert normalize_coords((20, -3), (15, 15), (15, 15)) == (14, 0)


def test_normalize_coords_rejects_bad_input() -> None:
    with pytest.raises(ArgumentError):
        normalize_coords((float("nan"), 0), (15, 15), (15, 15))
    with pytest.raises(ArgumentError):
        normalize_coords((1, 1), (0, 15), (15, 15))


# ── reads ────────────────────────────────────────────────────────────────────


def test_global_read_on_zero_map_is_input_independent() -> None:
    config = tiny_map_config()
    nm = _build(config)
    a = global_read(nm.initial_state(), nm.params, config)
    b = global_read(MapState.zeros(config), nm.params, config)
    assert a.shape == (config.channels,)
    np.testing.assert_array_equal(a.data, b.data)


def test_global_read_separates_different_maps() -> None:
    config = tiny_map_config(activation="tanh")
    nm = _build(config, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        first = _random_state(config, rng)
        second = _random_state(config, rng)
        r1 = global_read(first, nm.params, config).data
        r2 = global_read(second, nm.params, config).data
        assert not np.array_equal(r1, r2)


def test_crop_read_uses_window_around_agent() -> None:
    config = tiny_map_config(read="crop", crop_size=3)
    nm = _build(config)
    state = nm.initial_state()
    far = MapState(ad.scatter_write(state.memory, (6, 6), Value(np.full(config.channels, 5.0))))
    near = global_read(state, nm.params, config, center=(1, 1)).data
    np.testing.assert_array_equal(global_read(far, nm.params, config, center=(1, 1)).data, near)


def test_context_read_uniform_on_identical_columns(rng) -> None:
    config = tiny_map_config()
    nm = _build(config)
    column = rng.normal(size=config.channels)
    memory = np.repeat(np.repeat(column[:, None, None], config.height, axis=1), config.width, axis=2)
    c, attention = context_read(MapState(Value(memory)), _vec(rng, 4), _vec(rng, 4), nm.params, config)
    np.testing.assert_allclose(attention.data, 1 / (config.height * config.width), rtol=1e-5)
    np.testing.assert_allclose(c.data, column, rtol=1e-4, atol=1e-5)


@pytest.mark.parametrize("context", CONTEXT_VARIANTS)
def test_context_read_selects_dominant_column(context) -> None:
    config = tiny_map_config(context=context)
    nm = _build(config)
    dim = config.context_dim
    query = np.zeros((2 * config.channels, dim))
    query[: config.channels, :] = 10.0 / config.channels
    nm.params.assign("map/context/query", query)
    memory = np.zeros((config.channels, config.height, config.width))
    memory[:, 2, 5] = 1.0
    if context == "key_value":
        memory[dim:, 2, 5] = [3.0, -2.0]
    s = Value(np.ones(config.channels))
    r = Value(np.zeros(config.channels))
    c, attention = context_read(MapState(Value(memory)), s, r, nm.params, config)
    assert attention.data[2, 5] > 0.99
    assert attention.data.sum() == pytest.approx(1.0, abs=1e-6)
    expected = memory[dim:, 2, 5] if context == "key_value" else memory[:, 2, 5]
    np.testing.assert_allclose(c.data, expected, atol=1e-5)


# ── writes ───────────────────────────────────────────────────────────────────


def test_hard_write_zero_weights_returns_bias(rng) -> None:
    config = tiny_map_config(write="hard")
    nm = _build(config)
    nm.params.assign("map/write/fc2/weight", np.zeros_like(nm.params["map/write/fc2/weight"].data))
    bias = np.arange(config.channels, dtype=float)
    nm.params.assign("map/write/fc2/bias", bias)
    args = [_vec(rng, 4) for _ in range(4)]
    w = hard_write(*args, nm.params, config)
    np.testing.assert_array_equal(w.data, bias)


def _force_update_gate(nm: NeuralMap, bias: float) -> None:
    weight = nm.params["map/write/update/weight"]
    nm.params.assign("map/write/update/weight", np.zeros_like(weight.data))
    nm.params.assign("map/write/update/bias", np.full(nm.config.channels, bias))


def _candidate(nm: NeuralMap, s, r, c, m) -> np.ndarray:
    full = ad.concat([s, r, c, m])
    reset = ad.sigmoid(nm.params.linear("map/write/reset", full))
    pre = ad.add(
        nm.params.linear("map/write/candidate", ad.concat([s, r, c])),
        ad.project(ad.mul(reset, m), nm.params["map/write/candidate_recurrent"]),
    )
    return ad.tanh(pre).data


def test_gru_write_closed_update_gate_keeps_memory(rng) -> None:
    config = tiny_map_config()
    nm = _build(config)
    _force_update_gate(nm, -1000.0)
    s, r, c, m = (_vec(rng, 4) for _ in range(4))
    w = gru_write(s, r, c, m, nm.params, config)
    np.testing.assert_array_equal(w.data, m.data)


def test_gru_write_open_update_gate_takes_candidate(rng) -> None:
    config = tiny_map_config()
    nm = _build(config)
    _force_update_gate(nm, 1000.0)
    s, r, c, m = (_vec(rng, 4) for _ in range(4))
    w = gru_write(s, r, c, m, nm.params, config)
    np.testing.assert_array_equal(w.data, _candidate(nm, s, r, c, m))


def test_gru_write_lies_between_memory_and_candidate() -> None:
    config = tiny_map_config()
    rng = np.random.default_rng(8)
    for seed in range(20):
        nm = _build(config, seed=seed)
        for _ in range(50):
            s, r, c, m = (Value(rng.normal(scale=2.0, size=4)) for _ in range(4))
            w = gru_write(s, r, c, m, nm.params, config).data
            cand = _candidate(nm, s, r, c, m)
            lo = np.minimum(m.data, cand)
            hi = np.maximum(m.data, cand)
            assert np.all(w >= lo - 1e-5) and np.all(w <= hi + 1e-5)


def test_update_gate_bias_starts_negative() -> None:
    nm = _build(tiny_map_config())
    np.testing.assert_array_equal(nm.params["map/write/update/bias"].data, -1.0)


# ── map updates ──────────────────────────────────────────────────────────────


def test_update_with_current_column_is_fixed_point(rng) -> None:
    config = tiny_map_config()
    state = _random_state(config, rng)
    same = update(state, (4, 2), ad.column(state.memory, (4, 2)))
    np.testing.assert_array_equal(same.memory.data, state.memory.data)
    with pytest.raises(BoundsError):
        update(state, (7, 0), Value(np.ones(config.channels)))


def test_distinct_writes_modify_exactly_that_many_columns(rng) -> None:
    config = tiny_map_config(height=9, width=9)
    state = MapState.zeros(config)
    cells = [(int(i % 9), int(i // 9)) for i in rng.choice(81, size=12, replace=False)]
    for cell in cells:
        state = update(state, cell, Value(rng.normal(size=config.channels) + 3.0))
    assert _changed_columns(np.zeros((4, 9, 9)), state.memory.data) == set(cells)


def test_counter_transform_examples(rng) -> None:
    config = tiny_map_config()
    state = _random_state(config, rng)
    np.testing.assert_array_equal(counter_transform(state, Velocity(0, 0)).memory.data, state.memory.data)
    marked = np.zeros((config.channels, config.height, config.width))
    marked[:, 2, 3] = 1.0
    moved = counter_transform(MapState(Value(marked)), Velocity(1, 0)).memory.data
    assert _changed_columns(np.zeros_like(marked), moved) == {(2, 2)}


def test_counter_transform_matches_loop_and_is_linear(rng) -> None:
    config = tiny_map_config()
    for _ in range(20):
        u, v = (int(d) for d in rng.integers(-3, 4, size=2))
        a = _random_state(config, rng)
        b = _random_state(config, rng)
        shifted = counter_transform(a, Velocity(u, v)).memory.data
        np.testing.assert_array_equal(shifted, _naive_shift(a.memory.data, -u, -v))
        summed = counter_transform(MapState(ad.add(a.memory, b.memory)), Velocity(u, v)).memory.data
        np.testing.assert_allclose(summed, shifted + counter_transform(b, Velocity(u, v)).memory.data, atol=1e-6)
        back = counter_transform(counter_transform(a, Velocity(u, v)), Velocity(-u, -v)).memory.data
        band = _naive_shift(_naive_shift(np.ones_like(a.memory.data), -u, -v), u, v).astype(bool)
        np.testing.assert_array_equal(back, np.where(band, a.memory.data, 0.0))


def test_ego_update_writes_centre_only(rng) -> None:
    config = tiny_map_config()
    state = MapState.zeros(config)
    out = ego_update(state, Value(np.ones(config.channels)), config.center)
    assert _changed_columns(state.memory.data, out.memory.data) == {(3, 3)}


# ── full steps ───────────────────────────────────────────────────────────────


def test_first_step_writes_only_agent_cell() -> None:
    config = tiny_map_config()
    nm = _build(config)
    out = nm.step(nm.initial_state(), Value(np.ones(config.channels)), pose=Pose(2, 5))
    changed = _changed_columns(np.zeros((4, 7, 7)), out.new_map.memory.data)
    assert changed <= {(2, 5)}
    assert out.position == (2, 5)
    assert out.o.shape == (config.output_dim,)
    np.testing.assert_array_equal(out.o.data, np.concatenate([out.r.data, out.c.data, out.w.data]))


def test_key_value_output_length() -> None:
    config = tiny_map_config(context="key_value")
    nm = _build(config)
    out = nm.step(nm.initial_state(), Value(np.ones(config.channels)), pose=Pose(0, 0))
    assert out.o.shape == (2 * 4 + 2,)


def test_addressing_needs_matching_argument() -> None:
    nm = _build(tiny_map_config())
    with pytest.raises(ConfigError):
        nm.step(nm.initial_state(), Value(np.ones(4)), velocity=Velocity(1, 0))
    ego = _build(tiny_map_config(addressing="egocentric"))
    with pytest.raises(ConfigError):
        ego.step(ego.initial_state(), Value(np.ones(4)), pose=Pose(1, 1))


def test_two_ego_steps_move_first_write_one_cell() -> None:
    config = tiny_map_config(addressing="egocentric", activation="tanh")
    nm = _build(config, seed=2)
    s = Value(np.linspace(-1.0, 1.0, 4))
    first = nm.step(nm.initial_state(), s, velocity=Velocity(0, 0))
    second = nm.step(first.new_map, s, velocity=Velocity(1, 0))
    np.testing.assert_array_equal(second.new_map.memory.data[:, 3, 2], first.w.data)
    np.testing.assert_array_equal(second.new_map.memory.data[:, 3, 3], second.w.data)


def test_map_step_is_deterministic() -> None:
    config = tiny_map_config()
    s = Value(np.arange(4.0))
    a = _build(config, seed=5).step(MapState.zeros(config), s, pose=Pose(3, 4))
    b = _build(config, seed=5).step(MapState.zeros(config), s, pose=Pose(3, 4))
    np.testing.assert_array_equal(a.o.data, b.o.data)
    np.testing.assert_array_equal(a.attention, b.attention)
    np.testing.assert_array_equal(a.new_map.memory.data, b.new_map.memory.data)


def _sweep_invariants(steps: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    variants = [
        tiny_map_config(context=context, write=write, addressing=addressing, activation="tanh")
        for context in CONTEXT_VARIANTS
        for write in WRITE_VARIANTS
        for addressing in ADDRESSING_VARIANTS
    ]
    maps = [_build(config, seed=i) for i, config in enumerate(variants)]
    states = [nm.initial_state() for nm in maps]
    for i in range(steps):
        k = i % len(maps)
        nm, state = maps[k], states[k]
        s = _vec(rng, 4)
        velocity = Velocity(*(int(d) for d in rng.integers(-1, 2, size=2)))
        pose = Pose(*(int(d) for d in rng.integers(0, 7, size=2)))
        out = nm.step(state, s, pose=pose, velocity=velocity)
        assert out.attention.sum() == pytest.approx(1.0, abs=1e-6)
        changed = _changed_columns(out.read_map.memory.data, out.new_map.memory.data)
        assert changed <= {out.position}
        if nm.config.addressing == "egocentric":
            np.testing.assert_array_equal(
                out.read_map.memory.data, _naive_shift(state.memory.data, -velocity.u, -velocity.v)
            )
        states[k] = out.new_map.detached()


def test_memory_invariants_over_random_steps() -> None:
    _sweep_invariants(400, seed=0)


@pytest.mark.slow
def test_memory_invariants_over_ten_thousand_steps() -> None:
    _sweep_invariants(10_000, seed=1)


def test_unrolled_loss_reaches_first_embedding() -> None:
    config = tiny_map_config(activation="tanh")
    nm = _build(config, seed=6)
    rng = np.random.default_rng(6)
    embeddings = [Value(rng.normal(size=4), trainable=True) for _ in range(5)]
    state = nm.initial_state()
    out = None
    for t, s in enumerate(embeddings):
        out = nm.step(state, s, pose=Pose(t, 3))
        state = out.new_map
    ad.backward(ad.sum_(ad.mul(out.o, out.o)))
    assert np.abs(embeddings[0].grad).sum() > 0


def test_heatmap_file_keeps_attention(tmp_path, rng) -> None:
    rows = [HeatmapRow(step=t, pose_x=t, pose_y=1, attention=rng.dirichlet(np.ones(49)).reshape(7, 7)) for t in range(3)]
    path = tmp_path / "heatmap.csv"
    write_heatmap(path, rows)
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "step,pose_x,pose_y"
    loaded = read_heatmap(path, (7, 7))
    assert [r.step for r in loaded] == [0, 1, 2]
    np.testing.assert_allclose(loaded[1].attention, rows[1].attention, rtol=1e-5)
