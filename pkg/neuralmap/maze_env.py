"""
Goal-Search: a partially observable gridworld maze.

The agent starts at the topmost open cell facing south with a coloured
indicator directly below it. A green indicator means the red goal pays +1, a
blue one means the teal goal does; entering the other goal pays -1. Each step
returns a 5×15×3 occluded egocentric view.

Maze-set file format (one JSON object per line):
  {"id": hex, "size": n, "grid": ["#####", ...], "start": [x, y],
   "indicator": [x, y], "goal_red": [x, y], "goal_teal": [x, y]}
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ArgumentError, EnvStateError
from .neural_map import Heading, Pose, Velocity

WALL = "#"
EMPTY = "."

MAZE_SIZES = (5, 7, 9, 11, 13, 15)
TEST_SIZES = (7, 9, 11, 13, 15)
SMALL_MAX_SIZE = 11

OBS_CHANNELS = 5
VIEW_DEPTH = 15
VIEW_WIDTH = 3
CH_WALL, CH_GREEN, CH_BLUE, CH_RED, CH_TEAL = range(OBS_CHANNELS)

Cell = tuple[int, int]


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


N_ACTIONS = len(Action)


class IndicatorColor(str, Enum):
    GREEN = "green"
    BLUE = "blue"


class Outcome(str, Enum):
    NONE = "none"
    CORRECT_GOAL = "correct-goal"
    WRONG_GOAL = "wrong-goal"
    TIMEOUT = "timeout"


def _maze_hash(size: int, grid: tuple[str, ...], start: Cell, indicator: Cell, goal_red: Cell, goal_teal: Cell) -> str:
    payload = json.dumps(
        {
            "size": size,
            "grid": list(grid),
            "start": list(start),
            "indicator": list(indicator),
            "goal_red": list(goal_red),
            "goal_teal": list(goal_teal),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class MazeSpec:
    size: int
    grid: tuple[str, ...]
    start: Pose
    indicator: Cell
    goal_red: Cell
    goal_teal: Cell
    id: str = field(default="", compare=False)

    @classmethod
    def build(
        cls,
        grid: Iterable[str],
        start: Cell,
        indicator: Cell,
        goal_red: Cell,
        goal_teal: Cell,
    ) -> "MazeSpec":
        rows = tuple(grid)
        size = len(rows)
        if any(len(row) != size for row in rows):
            raise ArgumentError(f"maze grid must be square, got row lengths {[len(r) for r in rows]}")
        maze_id = _maze_hash(size, rows, start, indicator, goal_red, goal_teal)
        return cls(
            size=size,
            grid=rows,
            start=Pose(start[0], start[1], Heading.S),
            indicator=tuple(indicator),
            goal_red=tuple(goal_red),
            goal_teal=tuple(goal_teal),
            id=maze_id,
        )

    @property
    def width(self) -> int:
        return self.size

    @property
    def height(self) -> int:
        return self.size

    @cached_property
    def walls(self) -> np.ndarray:
        return np.array([[ch == WALL for ch in row] for row in self.grid], dtype=bool)

    def is_wall(self, x: int, y: int) -> bool:
        if not (0 <= x < self.size and 0 <= y < self.size):
            return True
        return bool(self.walls[y, x])

    def open_cells(self) -> list[Cell]:
        return [(x, y) for y in range(self.size) for x in range(self.size) if not self.walls[y, x]]

    def goal_for(self, color: IndicatorColor) -> Cell:
        return self.goal_teal if color is IndicatorColor.BLUE else self.goal_red

    def wrong_goal_for(self, color: IndicatorColor) -> Cell:
        return self.goal_red if color is IndicatorColor.BLUE else self.goal_teal


def size_bucket(size: int) -> str:
    return "small" if size <= SMALL_MAX_SIZE else "large"


def bucket_counts(mazes: Iterable[MazeSpec]) -> dict[str, int]:
    counts = {"small": 0, "large": 0}
    for m in mazes:
        counts[size_bucket(m.size)] += 1
    return counts


# ── search ───────────────────────────────────────────────────────────────────


class BfsResult(NamedTuple):
    reachable: bool
    length: int


def bfs_path(maze: MazeSpec, start: Cell, goal: Cell, blocked: frozenset[Cell] = frozenset()) -> list[Cell] | None:
    """Shortest 4-connected path over empty cells, endpoints included; None when unreachable."""
    for cell in (start, goal):
        if not (0 <= cell[0] < maze.size and 0 <= cell[1] < maze.size):
            raise ArgumentError(f"cell {cell} outside {maze.size}×{maze.size} maze")
    if start == goal:
        return [start]
    parent: dict[Cell, Cell] = {start: start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0)):
            nxt = (x + dx, y + dy)
            if nxt in parent or nxt in blocked or maze.is_wall(*nxt):
                continue
            parent[nxt] = (x, y)
            if nxt == goal:
                path = [nxt]
                while path[-1] != start:
                    path.append(parent[path[-1]])
                return path[::-1]
            queue.append(nxt)
    return None


def bfs_solvable(maze: MazeSpec, start: Cell, goal: Cell, blocked: frozenset[Cell] = frozenset()) -> BfsResult:
    path = bfs_path(maze, start, goal, blocked)
    if path is None:
        return BfsResult(False, -1)
    return BfsResult(True, len(path) - 1)


# ── line of sight and observations ───────────────────────────────────────────


def supercover_line(start: Cell, end: Cell) -> list[Cell]:
    """Every grid cell the segment between two cell centres touches, corners included."""
    x, y = start
    dx = end[0] - x
    dy = end[1] - y
    xstep = 1 if dx >= 0 else -1
    ystep = 1 if dy >= 0 else -1
    dx, dy = abs(dx), abs(dy)
    ddx, ddy = 2 * dx, 2 * dy
    cells = [(x, y)]
    if ddx >= ddy:
        error = prev = dx
        for _ in range(dx):
            x += xstep
            error += ddy
            if error > ddx:
                y += ystep
                error -= ddx
                if error + prev < ddx:
                    cells.append((x, y - ystep))
                elif error + prev > ddx:
                    cells.append((x - xstep, y))
                else:
                    cells.append((x, y - ystep))
                    cells.append((x - xstep, y))
            cells.append((x, y))
            prev = error
    else:
        error = prev = dy
        for _ in range(dy):
            y += ystep
            error += ddx
            if error > ddy:
                x += xstep
                error -= ddy
                if error + prev < ddy:
                    cells.append((x - xstep, y))
                elif error + prev > ddy:
                    cells.append((x, y - ystep))
                else:
                    cells.append((x - xstep, y))
                    cells.append((x, y - ystep))
            cells.append((x, y))
            prev = error
    return cells


def line_of_sight(maze: MazeSpec, origin: Cell, target: Cell) -> bool:
    return not any(maze.is_wall(*cell) for cell in supercover_line(origin, target)[1:-1])


def is_visible(maze: MazeSpec, origin: Cell, cell: Cell) -> bool:
    """Clear line of sight, or a wall that bounds a visible empty cell (the sight line ends on it)."""
    if line_of_sight(maze, origin, cell):
        return True
    if not maze.is_wall(*cell):
        return False
    x, y = cell
    for nx, ny in ((x, y - 1), (x + 1, y), (x, y + 1), (x - 1, y)):
        if not maze.is_wall(nx, ny) and line_of_sight(maze, origin, (nx, ny)):
            return True
    return False


def view_cell(pose: Pose, row: int, col: int) -> Cell:
    """World cell of window entry (row = distance ahead, col 0/1/2 = left/centre/right)."""
    fx, fy = pose.heading.vector
    rx, ry = -fy, fx
    lateral = col - 1
    return pose.x + row * fx + lateral * rx, pose.y + row * fy + lateral * ry


@lru_cache(maxsize=1 << 16)
def _visible_base(maze: MazeSpec, x: int, y: int, heading: Heading) -> np.ndarray:
    pose = Pose(x, y, heading)
    obs = np.zeros((OBS_CHANNELS, VIEW_DEPTH, VIEW_WIDTH), dtype=np.uint8)
    for row in range(VIEW_DEPTH):
        for col in range(VIEW_WIDTH):
            cell = view_cell(pose, row, col)
            if not is_visible(maze, (x, y), cell):
                continue
            if maze.is_wall(*cell):
                obs[CH_WALL, row, col] = 1
                continue
            if cell == maze.goal_red:
                obs[CH_RED, row, col] = 1
            elif cell == maze.goal_teal:
                obs[CH_TEAL, row, col] = 1
            elif cell == maze.indicator:
                # both indicator channels mark the visible cell; the colour is applied per episode
                obs[CH_GREEN, row, col] = 1
                obs[CH_BLUE, row, col] = 1
    obs.setflags(write=False)
    return obs


def render_observation(maze: MazeSpec, pose: Pose, color: IndicatorColor) -> np.ndarray:
    obs = _visible_base(maze, pose.x, pose.y, Heading(pose.heading)).copy()
    if color is IndicatorColor.GREEN:
        obs[CH_BLUE] = 0
    else:
        obs[CH_GREEN] = 0
    return obs


# ── generation ───────────────────────────────────────────────────────────────


def _carve_backtracker(size: int, rng: np.random.Generator) -> np.ndarray:
    walls = np.ones((size, size), dtype=bool)
    lattice = [(x, y) for y in range(1, size - 1, 2) for x in range(1, size - 1, 2)]
    first = lattice[int(rng.integers(len(lattice)))]
    walls[first[1], first[0]] = False
    stack = [first]
    while stack:
        x, y = stack[-1]
        options = [
            (x + dx, y + dy)
            for dx, dy in ((0, -2), (2, 0), (0, 2), (-2, 0))
            if 1 <= x + dx <= size - 2 and 1 <= y + dy <= size - 2 and walls[y + dy, x + dx]
        ]
        if not options:
            stack.pop()
            continue
        nx, ny = options[int(rng.integers(len(options)))]
        walls[(y + ny) // 2, (x + nx) // 2] = False
        walls[ny, nx] = False
        stack.append((nx, ny))
    return walls


def _open_loops(walls: np.ndarray, rng: np.random.Generator, fraction: float) -> None:
    size = walls.shape[0]
    for y in range(1, size - 1):
        for x in range(1, size - 1):
            if not walls[y, x] or (x % 2) == (y % 2):
                continue
            if rng.random() < fraction:
                walls[y, x] = False


def start_column(size: int) -> int:
    center = size // 2
    return center if center % 2 else center - 1


def maze_invariant_violations(maze: MazeSpec) -> list[str]:
    problems: list[str] = []
    size = maze.size
    if size % 2 == 0 or not MAZE_SIZES[0] <= size <= MAZE_SIZES[-1]:
        problems.append(f"size {size} not an odd integer in [5, 15]")
    walls = maze.walls
    if not (walls[0].all() and walls[-1].all() and walls[:, 0].all() and walls[:, -1].all()):
        problems.append("border is not all walls")
    start = (maze.start.x, maze.start.y)
    special = {"start": start, "indicator": maze.indicator, "goal_red": maze.goal_red, "goal_teal": maze.goal_teal}
    for name, cell in special.items():
        if maze.is_wall(*cell):
            problems.append(f"{name} {cell} is not an empty cell")
    if len(set(special.values())) != len(special):
        problems.append("start, indicator and goals are not distinct cells")
    if any(not walls[y, x] for y in range(maze.start.y) for x in range(size)):
        problems.append("start is not the topmost open row")
    if problems:
        return problems
    if not bfs_solvable(maze, start, maze.goal_red, frozenset({maze.goal_teal})).reachable:
        problems.append("red goal unreachable without crossing the teal goal")
    if not bfs_solvable(maze, start, maze.goal_teal, frozenset({maze.goal_red})).reachable:
        problems.append("teal goal unreachable without crossing the red goal")
    for color, channel in ((IndicatorColor.GREEN, CH_GREEN), (IndicatorColor.BLUE, CH_BLUE)):
        if not render_observation(maze, maze.start, color)[channel].any():
            problems.append(f"{color.value} indicator not visible from the start pose")
    return problems


def generate_maze(size: int, rng: np.random.Generator, loop_fraction: float = 0.1) -> MazeSpec:
    """Recursive-backtracker maze with a few loops, start on top, indicator below it, two far goals."""
    if size % 2 == 0 or not MAZE_SIZES[0] <= size <= MAZE_SIZES[-1]:
        raise ArgumentError(f"maze size must be odd and within [5, 15], got {size}")
    while True:
        walls = _carve_backtracker(size, rng)
        _open_loops(walls, rng, loop_fraction)
        sx = start_column(size)
        start = (sx, 1)
        indicator = (sx, 2)
        walls[indicator[1], indicator[0]] = False
        candidates = [
            (x, y)
            for y in range(size)
            for x in range(size)
            if not walls[y, x]
            and (x, y) not in (start, indicator)
            and abs(x - sx) + abs(y - 1) >= size / 2
        ]
        if len(candidates) < 2:
            continue
        red_idx, teal_idx = rng.choice(len(candidates), size=2, replace=False)
        grid = tuple("".join(WALL if w else EMPTY for w in row) for row in walls)
        maze = MazeSpec.build(grid, start, indicator, candidates[int(red_idx)], candidates[int(teal_idx)])
        if not maze_invariant_violations(maze):
            return maze


def sample_training_maze(
    rng: np.random.Generator,
    test_hashes: set[str] | frozenset[str],
    sizes: tuple[int, ...] = MAZE_SIZES,
    loop_fraction: float = 0.1,
) -> MazeSpec:
    for _ in range(100_000):
        size = int(sizes[int(rng.integers(len(sizes)))])
        maze = generate_maze(size, rng, loop_fraction)
        if maze.id not in test_hashes:
            return maze
    raise ArgumentError(f"every sampled maze of sizes {sizes} is in the held-out set")


def build_test_set(
    count: int,
    rng: np.random.Generator,
    sizes: tuple[int, ...] = TEST_SIZES,
    loop_fraction: float = 0.1,
) -> list[MazeSpec]:
    mazes: list[MazeSpec] = []
    seen: set[str] = set()
    budget = 100 * count + 1000
    while len(mazes) < count:
        budget -= 1
        if budget < 0:
            raise ArgumentError(f"could not draw {count} distinct mazes of sizes {sizes}; only {len(mazes)} found")
        size = int(sizes[int(rng.integers(len(sizes)))])
        maze = generate_maze(size, rng, loop_fraction)
        if maze.id in seen:
            continue
        seen.add(maze.id)
        mazes.append(maze)
    return mazes


# ── maze-set files ───────────────────────────────────────────────────────────


def maze_to_record(maze: MazeSpec) -> dict[str, object]:
    return {
        "id": maze.id,
        "size": maze.size,
        "grid": list(maze.grid),
        "start": [maze.start.x, maze.start.y],
        "indicator": list(maze.indicator),
        "goal_red": list(maze.goal_red),
        "goal_teal": list(maze.goal_teal),
    }


def maze_from_record(record: dict[str, object]) -> MazeSpec:
    maze = MazeSpec.build(
        record["grid"],
        tuple(record["start"]),
        tuple(record["indicator"]),
        tuple(record["goal_red"]),
        tuple(record["goal_teal"]),
    )
    if record.get("id") and record["id"] != maze.id:
        raise ArgumentError(f"maze record id {record['id']} does not match its content hash {maze.id}")
    return maze


def write_maze_set(path: Path, mazes: Iterable[MazeSpec], append: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w", encoding="utf-8", newline="\n") as f:
        for maze in mazes:
            f.write(json.dumps(maze_to_record(maze), separators=(", ", ": ")) + "\n")


def read_maze_set(path: Path) -> list[MazeSpec]:
    mazes: list[MazeSpec] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            mazes.append(maze_from_record(json.loads(line)))
    return mazes


# ── episodes ─────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class EnvState:
    maze: MazeSpec
    pose: Pose
    indicator_color: IndicatorColor
    step_limit: int = 100
    step_penalty: float = 0.01
    step_count: int = 0
    done: bool = False
    last_velocity: Velocity = Velocity()
    outcome: Outcome = Outcome.NONE


@dataclass(frozen=True)
class StepInfo:
    pose: Pose
    velocity: Velocity
    outcome: Outcome


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: StepInfo
    state: EnvState


def reset(
    maze: MazeSpec,
    rng: np.random.Generator,
    color: IndicatorColor | None = None,
    step_limit: int = 100,
    step_penalty: float = 0.01,
) -> tuple[EnvState, np.ndarray]:
    if color is None:
        color = IndicatorColor.GREEN if rng.random() < 0.5 else IndicatorColor.BLUE
    state = EnvState(
        maze=maze,
        pose=maze.start,
        indicator_color=color,
        step_limit=step_limit,
        step_penalty=step_penalty,
    )
    return state, render_observation(maze, state.pose, color)


def step(state: EnvState, action: Action | int) -> StepResult:
    if state.done:
        raise EnvStateError(f"step after episode end (outcome {state.outcome.value})")
    action = Action(action)
    pose = state.pose
    velocity = Velocity()
    if action is Action.TURN_LEFT:
        pose = replace(pose, heading=pose.heading.turned(-1))
    elif action is Action.TURN_RIGHT:
        pose = replace(pose, heading=pose.heading.turned(1))
    else:
        fx, fy = pose.heading.vector
        if not state.maze.is_wall(pose.x + fx, pose.y + fy):
            pose = replace(pose, x=pose.x + fx, y=pose.y + fy)
            velocity = Velocity(fx, fy)

    count = state.step_count + 1
    cell = (pose.x, pose.y)
    reward = -state.step_penalty
    outcome = Outcome.NONE
    if cell == state.maze.goal_for(state.indicator_color):
        reward, outcome = 1.0, Outcome.CORRECT_GOAL
    elif cell == state.maze.wrong_goal_for(state.indicator_color):
        reward, outcome = -1.0, Outcome.WRONG_GOAL
    elif count >= state.step_limit:
        outcome = Outcome.TIMEOUT
    done = outcome is not Outcome.NONE

    new_state = replace(state, pose=pose, step_count=count, done=done, last_velocity=velocity, outcome=outcome)
    obs = render_observation(state.maze, pose, state.indicator_color)
    return StepResult(
        observation=obs,
        reward=reward,
        done=done,
        info=StepInfo(pose=pose, velocity=velocity, outcome=outcome),
        state=new_state,
    )
