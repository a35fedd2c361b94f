"""
Command-line entry point.

  python3 -m neuralmap gen-mazes --count 1000 --sizes 7-15 --seed 0 --out data/test_mazes.jsonl
  python3 -m neuralmap train --config configs/desk_gru.json --out-dir runs/desk_gru
  python3 -m neuralmap eval --checkpoint runs/desk_gru/ckpt_2000000.nmck --maze-set data/desk_test_mazes.jsonl
  python3 -m neuralmap eval --agent random --maze-set data/desk_test_mazes.jsonl
  python3 -m neuralmap heatmap --checkpoint runs/desk_gru/ckpt_2000000.nmck --maze-id <hex> --out runs/desk_gru/heatmap
  python3 -m neuralmap gradcheck --seed 0

Exit codes: 0 success, 1 usage/config error, 2 runtime failure, 3 gradcheck failure.
Status lines go to stdout; `[error]` diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .agents import NeuralMapAgent, build_agent
from .checkpoint import Checkpoint, load_checkpoint, restore
from .config import (
    AGENT_VARIANTS,
    AgentConfig,
    RunConfig,
    apply_seed_env,
    load_run_config,
    with_overrides,
)
from .errors import ArgumentError, ConfigError, NeuralMapError
from .gradcheck import format_table, run_suite
from .maze_env import (
    CH_BLUE,
    CH_GREEN,
    CH_RED,
    CH_TEAL,
    IndicatorColor,
    MazeSpec,
    Outcome,
    build_test_set,
    read_maze_set,
    write_maze_set,
)
from .neural_map import HeatmapRow, Pose, write_heatmap
from .trainer import evaluate, run_episode, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"[error] {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def parse_sizes(text: str) -> tuple[int, ...]:
    """'7-15' -> odd sizes 7..15; '5,7' -> (5, 7)."""
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-", 1))
            sizes = tuple(s for s in range(lo, hi + 1) if s % 2)
        else:
            sizes = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ArgumentError(f"cannot parse sizes {text!r}") from exc
    if not sizes or any(s % 2 == 0 or not 5 <= s <= 15 for s in sizes):
        raise ArgumentError(f"sizes must be odd integers within [5, 15], got {text!r}")
    return sizes


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"[ok] wrote: {path}")


def _agent_from_checkpoint(path: Path) -> tuple[Any, RunConfig, Checkpoint]:
    checkpoint = load_checkpoint(path)
    config = RunConfig.from_dict(checkpoint.config)
    agent = build_agent(config.agent, np.random.default_rng(checkpoint.seed))
    restore(checkpoint, agent.params)
    return agent, config, checkpoint


def _fmt_rate(rate: float | None) -> str:
    return "n/a" if rate is None else f"{100 * rate:.1f}%"


# ── gen-mazes ────────────────────────────────────────────────────────────────


def cmd_gen_mazes(args: argparse.Namespace) -> int:
    sizes = parse_sizes(args.sizes)
    if args.count < 0:
        raise ArgumentError(f"--count must be >= 0, got {args.count}")
    rng = np.random.default_rng(args.seed)
    mazes = build_test_set(args.count, rng, sizes=sizes)
    write_maze_set(args.out, mazes, append=args.append)
    counts = Counter(m.size for m in mazes)
    print(f"[info] mazes: {len(mazes)} (seed {args.seed})")
    for size in sizes:
        print(f"[info] size {size}x{size}: {counts.get(size, 0)}")
    print(f"[ok] wrote: {args.out}")
    return EXIT_OK


# ── train ────────────────────────────────────────────────────────────────────


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config) if args.config else RunConfig()
    config = with_overrides(
        config,
        {
            "seed": args.seed,
            "agent.variant": args.agent,
            "train.total_steps": args.steps,
            "paths.test_set": str(args.test_set) if args.test_set else None,
            "paths.out_dir": str(args.out_dir) if args.out_dir else None,
        },
    )
    config = apply_seed_env(config)
    run_dir = Path(config.paths.out_dir)
    print(f"[info] run dir: {run_dir}")
    result = train_loop(config, run_dir, verbose=True)
    for key, rate in result.report.items():
        print(f"[eval] {key}: {_fmt_rate(rate)}")
    print(f"[ok] final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


# ── eval ─────────────────────────────────────────────────────────────────────


def cmd_eval(args: argparse.Namespace) -> int:
    if args.checkpoint is None and args.agent is None:
        raise ArgumentError("eval needs --checkpoint or --agent random|oracle")
    if args.checkpoint is not None:
        agent, _, _ = _agent_from_checkpoint(args.checkpoint)
        label = args.checkpoint.stem
        default_dir = args.checkpoint.parent
    else:
        if args.agent not in ("random", "oracle"):
            raise ArgumentError(f"--agent {args.agent} needs a --checkpoint")
        agent = build_agent(AgentConfig(variant=args.agent), np.random.default_rng(args.seed))
        label = args.agent
        default_dir = Path(".")
    mazes = read_maze_set(args.maze_set)
    result = evaluate(
        agent,
        mazes,
        np.random.default_rng(args.seed),
        cap=args.cap,
        episodes_per_maze=args.episodes_per_maze,
    )
    report = {
        "agent": agent.variant,
        "maze_set": str(args.maze_set),
        "cap": args.cap,
        "seed": args.seed,
        **result.as_dict(),
    }
    for bucket, rate in report["success_rate"].items():
        length = report["mean_length"][bucket]
        print(
            f"[eval] {bucket}: success {_fmt_rate(rate)} over {report['episodes'][bucket]} episodes, "
            f"mean length {'n/a' if length is None else f'{length:.1f}'}"
        )
    out = args.out or default_dir / f"eval_{label}_{args.maze_set.stem}.json"
    _write_json(out, report)
    return EXIT_OK


# ── heatmap ──────────────────────────────────────────────────────────────────


def indicator_map_cell(agent: NeuralMapAgent, maze: MazeSpec, pose: Pose) -> tuple[int, int] | None:
    """Map cell holding the indicator at this step; egocentric maps move it with the agent."""
    cfg = agent.config.map
    if cfg.addressing == "absolute":
        cell = agent.map_pose(Pose(*maze.indicator))
        return cell.x, cell.y
    cx, cy = cfg.center
    x = cx + maze.indicator[0] - pose.x
    y = cy + maze.indicator[1] - pose.y
    if 0 <= x < cfg.width and 0 <= y < cfg.height:
        return x, y
    return None


def attention_summary(
    agent: NeuralMapAgent,
    maze: MazeSpec,
    color: IndicatorColor,
    poses: Sequence[Pose],
    observations: Sequence[np.ndarray],
    attention: Sequence[np.ndarray],
) -> dict[str, Any]:
    """α at the indicator's map cell on the step the correct goal first enters view, vs its episode mean."""
    correct_ch = CH_TEAL if color is IndicatorColor.BLUE else CH_RED
    wrong_ch = CH_RED if color is IndicatorColor.BLUE else CH_TEAL

    def first_view(channel: int) -> int | None:
        return next((t for t, obs in enumerate(observations) if obs[channel].any()), None)

    at_indicator = []
    for pose, alpha in zip(poses, attention, strict=True):
        cell = indicator_map_cell(agent, maze, pose)
        at_indicator.append(float(alpha[cell[1], cell[0]]) if cell is not None else 0.0)

    first_correct = first_view(correct_ch)
    first_wrong = first_view(wrong_ch)
    mean_alpha = float(np.mean(at_indicator)) if at_indicator else None
    alpha_at_view = at_indicator[first_correct] if first_correct is not None else None
    absolute = agent.config.map.addressing == "absolute"
    return {
        "maze_id": maze.id,
        "indicator_color": color.value,
        "indicator_world_cell": list(maze.indicator),
        "indicator_map_cell": list(indicator_map_cell(agent, maze, poses[0])) if absolute and poses else None,
        "first_correct_view_step": first_correct,
        "first_wrong_view_step": first_wrong,
        "wrong_goal_seen_first": first_wrong is not None and (first_correct is None or first_wrong < first_correct),
        "alpha_at_first_correct_view": alpha_at_view,
        "episode_mean_alpha": mean_alpha,
        "indicator_focus": None if alpha_at_view is None else bool(alpha_at_view > mean_alpha),
        "steps": len(poses),
    }


def cmd_heatmap(args: argparse.Namespace) -> int:
    agent, config, _ = _agent_from_checkpoint(args.checkpoint)
    if not isinstance(agent, NeuralMapAgent):
        raise ArgumentError(f"heatmap export needs a neural_map agent, checkpoint holds {agent.variant!r}")
    maze_set = args.maze_set or Path(config.paths.test_set)
    mazes = {m.id: m for m in read_maze_set(maze_set)}
    if args.maze_id not in mazes:
        raise ArgumentError(f"maze id {args.maze_id} not found in {maze_set}")
    maze = mazes[args.maze_id]
    rng = np.random.default_rng(args.seed)
    color = IndicatorColor(args.color) if args.color else None
    final, trace = run_episode(agent, maze, rng, cap=args.cap, step_penalty=config.env.step_penalty, color=color)

    rows = [
        HeatmapRow(step=t, pose_x=state.pose.x, pose_y=state.pose.y, attention=out.attention)
        for t, (state, _, out, _) in enumerate(trace)
    ]
    out_dir: Path = args.out
    heatmap_path = out_dir / "heatmap.csv"
    write_heatmap(heatmap_path, rows)
    print(f"[ok] wrote: {heatmap_path}")

    trajectory_path = out_dir / "trajectory.jsonl"
    with trajectory_path.open("w", encoding="utf-8") as f:
        for t, (state, action, _, _) in enumerate(trace):
            f.write(
                json.dumps(
                    {
                        "step": t,
                        "x": state.pose.x,
                        "y": state.pose.y,
                        "heading": state.pose.heading.name,
                        "action": int(action),
                    }
                )
                + "\n"
            )
    print(f"[ok] wrote: {trajectory_path}")

    summary = attention_summary(
        agent,
        maze,
        final.indicator_color,
        [state.pose for state, _, _, _ in trace],
        [obs for _, _, _, obs in trace],
        [out.attention for _, _, out, _ in trace],
    )
    summary["outcome"] = final.outcome.value
    summary["success"] = final.outcome is Outcome.CORRECT_GOAL
    _write_json(out_dir / "attention_summary.json", summary)
    print(f"[info] outcome={final.outcome.value} steps={len(trace)} indicator_focus={summary['indicator_focus']}")
    return EXIT_OK


# ── gradcheck ────────────────────────────────────────────────────────────────


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rows = run_suite(seed=args.seed)
    print(format_table(rows))
    failed = [r for r in rows if not r.passed]
    if failed:
        for r in failed:
            print(
                f"[error] gradcheck failed: {r.case} rel_err={r.max_rel_error:.3e} at {r.worst_leaf}{list(r.worst_index)}",
                file=sys.stderr,
            )
        return EXIT_CHECK_FAILED
    print(f"[ok] gradcheck: {len(rows)} cases within tolerance")
    return EXIT_OK


# ── wiring ───────────────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neuralmap", description="Neural Map agents on the Goal-Search maze task.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-mazes", help="Build and serialize a held-out maze set.")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--sizes", default="7-15", help="'7-15' (odd sizes in range) or '5,7'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--append", action="store_true", help="append to an existing maze-set file")
    p.set_defaults(func=cmd_gen_mazes)

    p = sub.add_parser("train", help="Run synchronous A2C training.")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--agent", choices=AGENT_VARIANTS, default=None)
    p.add_argument("--steps", type=int, default=None, help="total env-steps")
    p.add_argument("--test-set", type=Path, default=None)
    p.add_argument("--out-dir", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Greedy evaluation on a maze set, bucketed by size.")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--agent", choices=("random", "oracle"), default=None)
    p.add_argument("--maze-set", type=Path, required=True)
    p.add_argument("--cap", type=int, default=500)
    p.add_argument("--episodes-per-maze", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="Export per-step context attention for one episode.")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--maze-id", required=True)
    p.add_argument("--maze-set", type=Path, default=None, help="defaults to the run's held-out set")
    p.add_argument("--color", choices=[c.value for c in IndicatorColor], default=None)
    p.add_argument("--cap", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="Finite-difference check of every differentiable op.")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError) as exc:
        print(f"[error] {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NeuralMapError, OSError) as exc:
        print(f"[error] {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
