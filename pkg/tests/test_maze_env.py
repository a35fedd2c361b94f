from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import chisquare

from neuralmap.errors import ArgumentError, EnvStateError
from neuralmap.maze_env import (
    CH_BLUE,
    CH_GREEN,
    CH_RED,
    CH_TEAL,
    CH_WALL,
    MAZE_SIZES,
    TEST_SIZES,
    Action,
    IndicatorColor,
    MazeSpec,
    Outcome,
    bfs_path,
    bfs_solvable,
    bucket_counts,
    build_test_set,
    generate_maze,
    maze_from_record,
    maze_invariant_violations,
    maze_to_record,
    read_maze_set,
    render_observation,
    reset,
    sample_training_maze,
    size_bucket,
    start_column,
    step,
    supercover_line,
    view_cell,
    write_maze_set,
)
from neuralmap.neural_map import Heading, Pose, Velocity

from .conftest import open_room


def _run(state, actions):
    result = None
    for action in actions:
        result = step(state, action)
        state = result.state
    return result


def _clone(rng: np.random.Generator) -> np.random.Generator:
    twin = np.random.Generator(np.random.PCG64())
    twin.bit_generator.state = rng.bit_generator.state
    return twin


# ── exact visibility oracle ──────────────────────────────────────────────────


def _segment_touches_cell(origin, target, cell) -> bool:
    """Closed segment between two cell centres against a closed unit square (Liang–Barsky)."""
    x0, y0 = Fraction(origin[0]), Fraction(origin[1])
    dx, dy = Fraction(target[0]) - x0, Fraction(target[1]) - y0
    half = Fraction(1, 2)
    xmin, xmax = cell[0] - half, cell[0] + half
    ymin, ymax = cell[1] - half, cell[1] + half
    t0, t1 = Fraction(0), Fraction(1)
    for p, q in ((-dx, x0 - xmin), (dx, xmax - x0), (-dy, y0 - ymin), (dy, ymax - y0)):
        if p == 0:
            if q < 0:
                return False
            continue
        t = q / p
        if p < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
    return t0 <= t1


def _oracle_clear(maze: MazeSpec, origin, target) -> bool:
    for x in range(min(origin[0], target[0]), max(origin[0], target[0]) + 1):
        for y in range(min(origin[1], target[1]), max(origin[1], target[1]) + 1):
            if (x, y) in (origin, target):
                continue
            if maze.is_wall(x, y) and _segment_touches_cell(origin, target, (x, y)):
                return False
    return True


def _oracle_visible(maze: MazeSpec, origin, cell) -> bool:
    if _oracle_clear(maze, origin, cell):
        return True
    if not maze.is_wall(*cell):
        return False
    x, y = cell
    return any(
        not maze.is_wall(*n) and _oracle_clear(maze, origin, n)
        for n in ((x, y - 1), (x + 1, y), (x, y + 1), (x - 1, y))
    )


def _oracle_observation(maze: MazeSpec, pose: Pose, color: IndicatorColor) -> np.ndarray:
    obs = np.zeros((5, 15, 3), dtype=np.uint8)
    origin = (pose.x, pose.y)
    for row in range(15):
        for col in range(3):
            cell = view_cell(pose, row, col)
            if not _oracle_visible(maze, origin, cell):
                continue
            if maze.is_wall(*cell):
                obs[CH_WALL, row, col] = 1
            elif cell == maze.goal_red:
                obs[CH_RED, row, col] = 1
            elif cell == maze.goal_teal:
                obs[CH_TEAL, row, col] = 1
            elif cell == maze.indicator:
                obs[CH_GREEN if color is IndicatorColor.GREEN else CH_BLUE, row, col] = 1
    return obs


def _compare_with_oracle(mazes, rng, limit: int) -> int:
    checked = 0
    for maze in mazes:
        for x, y in maze.open_cells():
            for heading in Heading:
                pose = Pose(x, y, heading)
                color = IndicatorColor.GREEN if rng.random() < 0.5 else IndicatorColor.BLUE
                got = render_observation(maze, pose, color)
                want = _oracle_observation(maze, pose, color)
                assert np.array_equal(got, want), (maze.id, pose, color)
                checked += 1
                if checked >= limit:
                    return checked
    return checked


# ── generation ───────────────────────────────────────────────────────────────


def test_generated_mazes_satisfy_invariants(rng) -> None:
    for size in MAZE_SIZES:
        for _ in range(8):
            maze = generate_maze(size, rng)
            assert maze_invariant_violations(maze) == []
            assert maze.size == size
            sx = start_column(size)
            assert maze.start == Pose(sx, 1, Heading.S)
            assert maze.indicator == (sx, 2)
            for goal in (maze.goal_red, maze.goal_teal):
                assert abs(goal[0] - sx) + abs(goal[1] - 1) >= size / 2


@pytest.mark.slow
def test_ten_thousand_generated_mazes_satisfy_invariants() -> None:
    rng = np.random.default_rng(2024)
    for i in range(10_000):
        maze = generate_maze(MAZE_SIZES[i % len(MAZE_SIZES)], rng)
        assert maze_invariant_violations(maze) == []


def test_generation_is_deterministic_for_a_seed() -> None:
    a = generate_maze(11, np.random.default_rng(7))
    b = generate_maze(11, np.random.default_rng(7))
    assert a == b
    assert a.id == b.id
    assert len(a.id) == 16


def test_generate_maze_rejects_bad_size(rng) -> None:
    with pytest.raises(ArgumentError):
        generate_maze(8, rng)
    with pytest.raises(ArgumentError):
        generate_maze(17, rng)


def test_maze_id_depends_on_goals() -> None:
    grid = open_room(7)
    a = MazeSpec.build(grid, (3, 1), (3, 2), (1, 5), (5, 5))
    b = MazeSpec.build(grid, (3, 1), (3, 2), (5, 5), (1, 5))
    assert a.id != b.id


def test_non_square_grid_is_rejected() -> None:
    with pytest.raises(ArgumentError):
        MazeSpec.build(["#####", "#...#"], (1, 1), (1, 2), (3, 1), (2, 1))


def _size_histogram(samples: int, seed: int) -> dict[int, int]:
    rng = np.random.default_rng(seed)
    counts = {size: 0 for size in MAZE_SIZES}
    for _ in range(samples):
        counts[sample_training_maze(rng, frozenset()).size] += 1
    return counts


def test_training_sizes_are_roughly_uniform() -> None:
    counts = _size_histogram(600, 3)
    assert all(60 <= n <= 140 for n in counts.values()), counts


@pytest.mark.slow
def test_training_sizes_are_uniform_within_five_percent() -> None:
    counts = _size_histogram(12_000, 4)
    assert chisquare(list(counts.values())).pvalue > 1e-3, counts
    assert all(abs(n - 2000) <= 150 for n in counts.values()), counts


def test_training_sampler_skips_held_out_mazes() -> None:
    rng = np.random.default_rng(11)
    first = sample_training_maze(_clone(rng), frozenset())
    drawn = sample_training_maze(rng, frozenset({first.id}))
    assert drawn.id != first.id


def test_test_set_is_unique_and_uses_test_sizes(rng) -> None:
    mazes = build_test_set(30, rng)
    assert len({m.id for m in mazes}) == 30
    assert all(m.size in TEST_SIZES for m in mazes)
    counts = bucket_counts(mazes)
    assert counts["small"] + counts["large"] == 30


def test_size_bucket_boundary() -> None:
    assert size_bucket(11) == "small"
    assert size_bucket(13) == "large"


def test_maze_set_file_keeps_ids(tmp_path, rng) -> None:
    mazes = build_test_set(5, rng, sizes=(5, 7))
    path = tmp_path / "set.jsonl"
    write_maze_set(path, mazes[:3])
    write_maze_set(path, mazes[3:], append=True)
    loaded = read_maze_set(path)
    assert [m.id for m in loaded] == [m.id for m in mazes]
    assert loaded == mazes


def test_tampered_record_is_rejected(rng) -> None:
    record = maze_to_record(generate_maze(7, rng))
    record["goal_red"], record["goal_teal"] = record["goal_teal"], record["goal_red"]
    with pytest.raises(ArgumentError):
        maze_from_record(record)


# ── search and sight lines ───────────────────────────────────────────────────


def test_bfs_in_open_room(room_maze) -> None:
    path = bfs_path(room_maze, (3, 1), (1, 5))
    assert path[0] == (3, 1)
    assert path[-1] == (1, 5)
    assert len(path) - 1 == 6
    assert bfs_solvable(room_maze, (3, 1), (1, 5)).length == 6


def test_bfs_respects_blocked_cells() -> None:
    grid = ["#####", "#...#", "###.#", "#...#", "#####"]
    maze = MazeSpec.build(grid, (1, 1), (2, 1), (1, 3), (2, 3))
    assert bfs_solvable(maze, (1, 1), (1, 3), frozenset({(2, 3)})) == (False, -1)
    assert bfs_solvable(maze, (1, 1), (1, 3)).length == 6


def test_supercover_includes_both_corner_cells() -> None:
    assert supercover_line((0, 0), (3, 0)) == [(0, 0), (1, 0), (2, 0), (3, 0)]
    diagonal = supercover_line((0, 0), (1, 1))
    assert set(diagonal) == {(0, 0), (1, 0), (0, 1), (1, 1)}


# ── observations ─────────────────────────────────────────────────────────────


def test_observation_facing_adjacent_wall_is_blank_beyond_it() -> None:
    grid = ["#######", "#.#...#"] + ["#.....#"] * 4 + ["#######"]
    maze = MazeSpec.build(grid, (1, 1), (1, 2), (5, 5), (3, 5))
    obs = render_observation(maze, Pose(1, 1, Heading.E), IndicatorColor.GREEN)
    assert obs.shape == (5, 15, 3)
    assert obs.dtype == np.uint8
    assert not obs[:, 2:].any()
    assert obs[CH_WALL, 1, 1] == 1
    assert obs[CH_WALL, 0, 0] == 1
    assert obs[CH_GREEN, 0, 2] == 1


def test_corridor_shows_both_side_walls() -> None:
    grid = ["#" * 7 + "." + "#" * 7] * 15
    maze = MazeSpec.build(grid, (7, 0), (7, 1), (7, 13), (7, 14))
    obs = render_observation(maze, Pose(7, 0, Heading.S), IndicatorColor.BLUE)
    assert obs[CH_WALL, :, 0].all()
    assert obs[CH_WALL, :, 2].all()
    assert not obs[CH_WALL, :, 1].any()
    assert obs[CH_BLUE, 1, 1] == 1
    assert obs[CH_RED, 13, 1] == 1
    assert obs[CH_TEAL, 14, 1] == 1


def test_indicator_channel_follows_episode_colour(room_maze, rng) -> None:
    _, green = reset(room_maze, rng, IndicatorColor.GREEN)
    _, blue = reset(room_maze, rng, IndicatorColor.BLUE)
    assert green[CH_GREEN, 1, 1] == 1
    assert not green[CH_BLUE].any()
    assert blue[CH_BLUE, 1, 1] == 1
    assert not blue[CH_GREEN].any()


def test_observations_match_exact_oracle(rng) -> None:
    mazes = [generate_maze(size, rng) for size in (5, 7, 9)]
    assert _compare_with_oracle(mazes, rng, limit=400) >= 200


@pytest.mark.slow
def test_thousand_observations_match_exact_oracle() -> None:
    rng = np.random.default_rng(31)
    mazes = [generate_maze(MAZE_SIZES[i % len(MAZE_SIZES)], rng) for i in range(60)]
    assert _compare_with_oracle(mazes, rng, limit=1000) == 1000


# ── episodes ─────────────────────────────────────────────────────────────────


def test_reset_starts_at_maze_start(room_maze, rng) -> None:
    state, obs = reset(room_maze, rng)
    assert state.pose == room_maze.start
    assert state.step_count == 0
    assert not state.done
    assert np.array_equal(obs, render_observation(room_maze, state.pose, state.indicator_color))


def test_turns_rotate_heading(room_maze, rng) -> None:
    state, _ = reset(room_maze, rng, IndicatorColor.GREEN)
    left = step(state, Action.TURN_LEFT)
    right = step(state, Action.TURN_RIGHT)
    assert left.info.pose == Pose(3, 1, Heading.E)
    assert right.info.pose == Pose(3, 1, Heading.W)
    assert left.info.velocity == Velocity(0, 0)
    assert left.reward == pytest.approx(-0.01)


def test_forward_moves_and_reports_velocity(room_maze, rng) -> None:
    state, _ = reset(room_maze, rng, IndicatorColor.GREEN)
    result = step(state, Action.FORWARD)
    assert result.info.pose == Pose(3, 2, Heading.S)
    assert result.info.velocity == Velocity(0, 1)
    assert result.state.last_velocity == Velocity(0, 1)


def test_forward_into_wall_keeps_pose(room_maze, rng) -> None:
    state, _ = reset(room_maze, rng, IndicatorColor.GREEN)
    state = step(state, Action.TURN_LEFT).state
    state = step(state, Action.FORWARD).state
    state = step(state, Action.FORWARD).state
    assert state.pose == Pose(5, 1, Heading.E)
    blocked = step(state, Action.FORWARD)
    assert blocked.info.pose == state.pose
    assert blocked.info.velocity == Velocity(0, 0)
    assert blocked.reward == pytest.approx(-0.01)
    assert not blocked.done


def test_correct_goal_pays_one_and_ends(room_maze, rng) -> None:
    state, _ = reset(room_maze, rng, IndicatorColor.GREEN)
    result = _run(state, [Action.FORWARD] * 4 + [Action.TURN_RIGHT] + [Action.FORWARD] * 2)
    assert (result.info.pose.x, result.info.pose.y) == room_maze.goal_red
    assert result.reward == 1.0
    assert result.done
    assert result.info.outcome is Outcome.CORRECT_GOAL


def test_wrong_goal_pays_minus_one(room_maze, rng) -> None:
    state, _ = reset(room_maze, rng, IndicatorColor.BLUE)
    result = _run(state, [Action.FORWARD] * 4 + [Action.TURN_RIGHT] + [Action.FORWARD] * 2)
    assert result.reward == -1.0
    assert result.done
    assert result.info.outcome is Outcome.WRONG_GOAL


def test_timeout_at_step_limit(room_maze, rng) -> None:
    state, _ = reset(room_maze, rng, IndicatorColor.GREEN, step_limit=100)
    for i in range(99):
        result = step(state, Action.TURN_LEFT)
        assert not result.done, i
        state = result.state
    final = step(state, Action.TURN_LEFT)
    assert final.done
    assert final.info.outcome is Outcome.TIMEOUT
    assert final.reward == pytest.approx(-0.01)
    assert final.state.step_count == 100


def test_step_after_done_raises(room_maze, rng) -> None:
    state, _ = reset(room_maze, rng, IndicatorColor.GREEN, step_limit=1)
    done = step(state, Action.TURN_LEFT).state
    assert done.done
    with pytest.raises(EnvStateError):
        step(done, Action.FORWARD)


def test_reset_colour_is_drawn_from_rng(room_maze) -> None:
    rng = np.random.default_rng(0)
    colours = {reset(room_maze, rng)[0].indicator_color for _ in range(40)}
    assert colours == {IndicatorColor.GREEN, IndicatorColor.BLUE}
