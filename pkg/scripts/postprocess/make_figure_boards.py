#!/usr/bin/env python3
"""
Figure boards for Neural Map training runs.
Generates training curves, the held-out success board and the context-attention
board from a heatmap export, each with provenance metadata.

Usage:
    PYTHONPATH=. python3 scripts/postprocess/make_figure_boards.py --run-dir runs/desk_gru runs/desk_hard runs/desk_random \
        --heatmap-dir runs/desk_gru/heatmap --outdir plots/desk
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import matplotlib as mpl
import matplotlib.pyplot as plt
from matplotlib.colors import ListedColormap
from matplotlib.patches import Rectangle
import numpy as np
import pandas as pd

from neuralmap.maze_env import read_maze_set
from neuralmap.neural_map import read_heatmap

# ── Global rcParams ─────────────────────────────────────────────────────────
mpl.rcParams.update({
    "pdf.fonttype": 42,
    "ps.fonttype": 42,
    "font.family": "sans-serif",
    "font.sans-serif": ["Arial", "Helvetica", "DejaVu Sans"],
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.linewidth": 0.8,
    "axes.grid": False,
    "lines.linewidth": 1.4,
    "savefig.dpi": 300,
    "savefig.bbox": "tight",
    "savefig.pad_inches": 0.05,
    "figure.dpi": 150,
})

# Goal / indicator colours match the observation channels.
C = {
    "green": "#59A14F",
    "blue": "#4878CF",
    "red": "#D65F5F",
    "teal": "#76B7B2",
    "wall": "#3a3a3a",
    "floor": "#f4f4f4",
    "path": "#E8853D",
    "neutral": "#999999",
}
CAT8 = ["#4878CF", "#D65F5F", "#59A14F", "#E8853D", "#B07AA1", "#76B7B2", "#EDC949", "#AF7AA1"]

SMOOTH_WINDOW = 5
EPOCH_STEPS = 250_000  # concurrent env-steps per training epoch
INPUT_CHECKSUMS: dict[str, str] = {}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _register(path: Path) -> str:
    key = str(path)
    if path.exists():
        INPUT_CHECKSUMS[key] = _sha256(path)
    return key


def _save_fig(fig: plt.Figure, stem: Path, meta: dict[str, Any]) -> None:
    """Save PDF + PNG + meta.json."""
    stem.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(stem.with_suffix(".pdf"), bbox_inches="tight")
    fig.savefig(stem.with_suffix(".png"), dpi=300, bbox_inches="tight")
    plt.close(fig)

    inputs = meta.get("inputs", [])
    meta["inputs_sha256"] = {p: INPUT_CHECKSUMS.get(p) for p in inputs if p in INPUT_CHECKSUMS}
    meta["output_pdf"] = str(stem.with_suffix(".pdf"))
    meta["output_png"] = str(stem.with_suffix(".png"))
    meta["generated_utc"] = datetime.now(timezone.utc).isoformat()
    meta["software"] = {
        "python": sys.version,
        "matplotlib": mpl.__version__,
        "pandas": pd.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
    }
    with open(stem.with_suffix(".meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, default=str)


def _panel_label(ax: plt.Axes, label: str) -> None:
    ax.text(-0.12, 1.10, label, transform=ax.transAxes, fontsize=14, fontweight="bold", va="top", ha="left")


def _run_label(run_dir: Path) -> str:
    config_path = run_dir / "run_config.json"
    if not config_path.exists():
        return run_dir.name
    agent = json.loads(config_path.read_text(encoding="utf-8"))["agent"]
    if agent["variant"] != "neural_map":
        return agent["variant"]
    m = agent["map"]
    return f"neural_map ({m['write']}, {m['context']}, {m['addressing']})"


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Training curves
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def make_training_curves(run_dirs: list[Path], outdir: Path, epoch_steps: int = EPOCH_STEPS) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.0))
    inputs = []
    for i, run_dir in enumerate(run_dirs):
        path = run_dir / "metrics.csv"
        if not path.exists():
            print(f"[info] skipping run without metrics.csv: {run_dir}")
            continue
        inputs.append(_register(path))
        df = pd.read_csv(path)
        color = CAT8[i % len(CAT8)]
        label = _run_label(run_dir)
        for ax, column in zip(axes[:2], ("success_rate", "mean_return")):
            series = df[column].rolling(SMOOTH_WINDOW, min_periods=1).mean()
            ax.plot(df["env_steps"] / epoch_steps, series, color=color, label=label)

        history_path = run_dir / "eval_history.jsonl"
        if history_path.exists() and history_path.stat().st_size:
            inputs.append(_register(history_path))
            hist = pd.read_json(history_path, lines=True)
            axes[2].plot(hist["env_steps"] / epoch_steps, hist["test_total"], marker="o", ms=3, color=color, label=label)

    axes[0].set_ylabel("Training success rate")
    axes[0].set_ylim(-0.02, 1.02)
    axes[1].set_ylabel("Mean episode return")
    axes[2].set_ylabel("Held-out success (greedy)")
    axes[2].set_ylim(-0.02, 1.02)
    for ax, label in zip(axes, "abc"):
        ax.set_xlabel(f"Epoch ({epoch_steps:,} env-steps)")
        _panel_label(ax, label)
    axes[0].legend(frameon=False, loc="lower right")

    meta = {
        "figure": "Figure1_Training_Curves",
        "panels": ["a:train_success", "b:train_return", "c:heldout_success"],
        "inputs": inputs,
        "smoothing_window": SMOOTH_WINDOW,
        "epoch_steps": epoch_steps,
    }
    _save_fig(fig, outdir / "Figure1_Training_Curves", meta)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Success board (train/test × small/large/total)
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def make_success_board(run_dirs: list[Path], outdir: Path) -> None:
    records = []
    inputs = []
    for run_dir in run_dirs:
        path = run_dir / "eval_report.json"
        if not path.exists():
            continue
        inputs.append(_register(path))
        report = json.loads(path.read_text(encoding="utf-8"))
        for key, value in report.items():
            split, bucket = key.split("_", 1)
            records.append({"run": _run_label(run_dir), "split": split, "bucket": bucket, "success": value})
    if not records:
        print("[info] no eval_report.json found; success board skipped")
        return
    df = pd.DataFrame.from_records(records)
    df["success"] = pd.to_numeric(df["success"], errors="coerce")

    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.0), sharey=True)
    runs = list(dict.fromkeys(df["run"]))
    buckets = ["small", "large", "total"]
    width = 0.8 / max(len(runs), 1)
    x = np.arange(len(buckets))
    for ax, split, label in zip(axes, ("train", "test"), "ab"):
        sub = df[df["split"] == split]
        for i, run in enumerate(runs):
            values = [sub[(sub["run"] == run) & (sub["bucket"] == b)]["success"].mean() for b in buckets]
            ax.bar(x + i * width - 0.4 + width / 2, values, width=width, color=CAT8[i % len(CAT8)], label=run)
        ax.set_xticks(x, buckets)
        ax.set_title(f"{split} mazes")
        ax.set_ylim(0, 1.05)
        _panel_label(ax, label)
    axes[0].set_ylabel("Success rate (greedy)")
    axes[1].legend(frameon=False, fontsize=7, loc="upper right")

    meta = {
        "figure": "Figure2_Success_Board",
        "panels": ["a:train_buckets", "b:test_buckets"],
        "inputs": inputs,
        "table": df.to_dict(orient="records"),
    }
    _save_fig(fig, outdir / "Figure2_Success_Board", meta)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Context attention board
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def _draw_maze(ax: plt.Axes, maze, trajectory: pd.DataFrame, indicator_color: str) -> None:
    ax.imshow(maze.walls, cmap=ListedColormap([C["floor"], C["wall"]]), interpolation="nearest")
    ax.plot(trajectory["x"], trajectory["y"], color=C["path"], lw=1.2)
    ax.scatter([maze.start.x], [maze.start.y], marker="o", s=25, color="black", zorder=3)
    ix, iy = maze.indicator
    ax.scatter([ix], [iy], marker="s", s=60, color=C[indicator_color], zorder=3)
    for (gx, gy), name in ((maze.goal_red, "red"), (maze.goal_teal, "teal")):
        ax.scatter([gx], [gy], marker="*", s=90, color=C[name], zorder=3)
    ax.set_xticks([])
    ax.set_yticks([])


def make_attention_board(heatmap_dir: Path, maze_set: Path, outdir: Path) -> None:
    summary_path = heatmap_dir / "attention_summary.json"
    heatmap_path = heatmap_dir / "heatmap.csv"
    trajectory_path = heatmap_dir / "trajectory.jsonl"
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    mazes = {m.id: m for m in read_maze_set(maze_set)}
    maze = mazes[summary["maze_id"]]

    header = heatmap_path.read_text(encoding="utf-8").splitlines()
    cells = len(header[1].split(",")) - 3
    side = int(round(np.sqrt(cells)))
    rows = read_heatmap(heatmap_path, (side, side))
    trajectory = pd.read_json(trajectory_path, lines=True)

    seen = summary.get("first_correct_view_step")
    wrong = summary.get("first_wrong_view_step")
    picks = sorted({t for t in (wrong, seen, len(rows) - 1) if t is not None})

    fig, axes = plt.subplots(1, len(picks) + 2, figsize=(2.3 * (len(picks) + 2), 2.6))
    _draw_maze(axes[0], maze, trajectory, summary["indicator_color"])
    axes[0].set_title(f"maze {maze.id[:6]} ({summary['outcome']})")
    _panel_label(axes[0], "a")

    vmax = max(float(r.attention.max()) for r in rows)
    cell = summary.get("indicator_map_cell")
    for ax, t in zip(axes[1:-1], picks):
        im = ax.imshow(rows[t].attention, cmap="magma", vmin=0.0, vmax=vmax, interpolation="nearest")
        if cell is not None:
            ax.add_patch(Rectangle((cell[0] - 0.5, cell[1] - 0.5), 1, 1, fill=False, ec=C["green"], lw=1.2))
        ax.scatter([rows[t].pose_x], [rows[t].pose_y], marker="x", s=20, color="white")
        tag = {seen: " (correct goal seen)", wrong: " (wrong goal seen)"}.get(t, "") if t != len(rows) - 1 else " (final)"
        ax.set_title(f"t={t}{tag}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[1:-1], fraction=0.02, pad=0.02, label="context attention")
    _panel_label(axes[1], "b")

    ax = axes[-1]
    if cell is not None:
        alpha = np.array([r.attention[cell[1], cell[0]] for r in rows])
        ax.plot(np.arange(len(alpha)), alpha, color=C["blue"])
        if summary.get("episode_mean_alpha") is not None:
            ax.axhline(summary["episode_mean_alpha"], color=C["neutral"], ls="--", lw=0.8)
        if seen is not None:
            ax.axvline(seen, color=C["green"], lw=0.8)
        ax.set_xlabel("Step")
        ax.set_ylabel("Attention at indicator")
    _panel_label(ax, "c")

    meta = {
        "figure": "Figure3_Context_Attention",
        "panels": ["a:maze_trajectory", "b:attention_snapshots", "c:indicator_attention"],
        "inputs": [_register(p) for p in (summary_path, heatmap_path, trajectory_path, maze_set)],
        "steps_shown": picks,
        "summary": summary,
    }
    _save_fig(fig, outdir / "Figure3_Context_Attention", meta)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# CLI
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Build figure boards from training runs.")
    parser.add_argument("--run-dir", type=Path, nargs="+", required=True)
    parser.add_argument("--heatmap-dir", type=Path, default=None)
    parser.add_argument("--maze-set", type=Path, default=None, help="defaults to the first run's test set")
    parser.add_argument("--outdir", type=Path, default=Path("plots"))
    parser.add_argument("--epoch-steps", type=int, default=EPOCH_STEPS)
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    outdir = args.outdir.resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    run_dirs = [p.resolve() for p in args.run_dir]

    print("[1/3] Figure 1: Training Curves")
    make_training_curves(run_dirs, outdir, args.epoch_steps)

    print("[2/3] Figure 2: Success Board")
    make_success_board(run_dirs, outdir)

    if args.heatmap_dir is not None:
        maze_set = args.maze_set
        if maze_set is None:
            config = json.loads((run_dirs[0] / "run_config.json").read_text(encoding="utf-8"))
            maze_set = Path(config["paths"]["test_set"])
        print("[3/3] Figure 3: Context Attention")
        make_attention_board(args.heatmap_dir.resolve(), maze_set, outdir)
    else:
        print("[3/3] Figure 3: skipped (no --heatmap-dir)")

    with open(outdir / "_input_checksums.json", "w") as f:
        json.dump(INPUT_CHECKSUMS, f, indent=2)

    print(f"[ok] all figure boards written to: {outdir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
