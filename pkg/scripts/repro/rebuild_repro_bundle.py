#!/usr/bin/env python3
"""
Rebuild the reproducibility bundle for one training run directory.

Writes into <run-dir>/repro/:
  - artifact_hashes.sha256   (paths relative to the run directory)
  - repro_env_snapshot.txt
  - repro_data_sanity.txt    (metrics / history / held-out set checks)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd

from neuralmap.checkpoint import load_checkpoint
from neuralmap.errors import NeuralMapError
from neuralmap.maze_env import read_maze_set
from neuralmap.trainer import METRICS_FIELDS


HASH_GLOBS = [
    "run_config.json",
    "metrics.csv",
    "eval_history.jsonl",
    "eval_report.json",
    "ckpt_*.nmck",
    "eval_*.json",
    "heatmap/*",
]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Rebuild <run-dir>/repro bundle (relative paths).")
    p.add_argument("--run-dir", type=Path, required=True)
    return p.parse_args()


def _sanity(run_dir: Path) -> list[str]:
    lines: list[str] = []

    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        df = pd.read_csv(metrics_path)
        increasing = bool(df["env_steps"].is_monotonic_increasing and df["env_steps"].is_unique)
        lines.append(f"metrics.csv:rows={len(df)},cols_match={list(df.columns) == METRICS_FIELDS},increasing={increasing}")
        if len(df):
            lines.append(f"metrics.csv:last_env_steps={int(df['env_steps'].iloc[-1])}")
    else:
        lines.append("MISSING metrics.csv")

    report_path = run_dir / "eval_report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text(encoding="utf-8"))
        lines.append(f"eval_report.json:keys={sorted(report)},test_total={report.get('test_total')}")
    else:
        lines.append("MISSING eval_report.json")

    config_path = run_dir / "run_config.json"
    if not config_path.exists():
        lines.append("MISSING run_config.json")
        return lines
    config = json.loads(config_path.read_text(encoding="utf-8"))

    test_set = Path(config["paths"]["test_set"])
    if test_set.exists():
        mazes = read_maze_set(test_set)
        lines.append(f"{test_set.name}:mazes={len(mazes)},unique_ids={len({m.id for m in mazes})},sha256={_sha256(test_set)}")
    else:
        lines.append(f"MISSING {test_set}")

    for ckpt_path in sorted(run_dir.glob("ckpt_*.nmck"), key=lambda p: int(p.stem.split("_")[1])):
        try:
            ckpt = load_checkpoint(ckpt_path)
        except NeuralMapError as e:
            lines.append(f"{ckpt_path.name}:UNREADABLE {e}")
            continue
        lines.append(
            f"{ckpt_path.name}:env_steps={ckpt.env_steps},seed={ckpt.seed},"
            f"parameters={len(ckpt.parameters)},optimizer_steps={ckpt.optimizer_steps}"
        )
    return lines


def main() -> int:
    args = parse_args()
    run_dir = args.run_dir.resolve()
    if not run_dir.is_dir():
        print(f"[error] run directory not found: {run_dir}", file=sys.stderr)
        return 1
    out_dir = run_dir / "repro"
    out_dir.mkdir(parents=True, exist_ok=True)

    # ── artifact hashes ──────────────────────────────────────────────────
    files: list[Path] = []
    for pattern in HASH_GLOBS:
        files.extend(sorted(run_dir.glob(pattern)))
    files = [p for p in files if p.is_file()]

    lines = []
    for p in sorted(set(files)):
        rel = p.relative_to(run_dir)
        lines.append(f"{_sha256(p)}  {rel}")
    (out_dir / "artifact_hashes.sha256").write_text("\n".join(lines) + "\n", encoding="utf-8")

    # ── env snapshot ─────────────────────────────────────────────────────
    pip = subprocess.run([sys.executable, "-m", "pip", "freeze"], capture_output=True, text=True)
    pip_freeze = pip.stdout.strip()
    env_text = "\n".join(
        [
            f"timestamp_utc={_utc_now()}",
            f"python={sys.version.splitlines()[0]}",
            f"platform={platform.platform()}",
            "",
            "[pip_freeze]",
            pip_freeze,
            "",
        ]
    )
    (out_dir / "repro_env_snapshot.txt").write_text(env_text, encoding="utf-8")

    # ── lightweight data sanity ──────────────────────────────────────────
    (out_dir / "repro_data_sanity.txt").write_text("\n".join(_sanity(run_dir)) + "\n", encoding="utf-8")

    print(f"[ok] wrote {out_dir} bundle ({len(lines)} artifacts hashed)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
