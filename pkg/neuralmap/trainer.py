"""
Synchronous advantage actor-critic over N concurrent Goal-Search environments.

One update:
  collect_rollout  -> step every env in lockstep for rollout_length steps,
                      building one unrolled graph per env
  compute_returns  -> bootstrapped n-step returns and advantages
  a2c_update       -> policy + value + entropy loss, one backward pass, RMSProp

Carries are detached at rollout boundaries (truncated BPTT). All parameter
mutation happens here, in the caller's thread.

Run directory:
  run_config.json      resolved config
  metrics.csv          one MetricsRow per update
  ckpt_<envsteps>.nmck checkpoints (initial, every eval interval, final)
  eval_history.jsonl   periodic greedy evaluation on a prefix of the held-out set
  eval_report.json     final report: train_/test_ × small/large/total success rates
"""

from __future__ import annotations

import csv
import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .agents import Agent, AgentCarry, PolicyOutput, build_agent
from .autodiff import RMSProp, RMSPropConfig
from .checkpoint import checkpoint_name, save_checkpoint
from .config import EnvConfig, RunConfig, TrainConfig, write_run_config
from .errors import ArgumentError, ConfigError, EnvStateError, NeuralMapError, NumericError
from .maze_env import (
    EnvState,
    IndicatorColor,
    MazeSpec,
    Outcome,
    read_maze_set,
    reset,
    sample_training_maze,
    size_bucket,
    step,
)
from .neural_map import Pose, Velocity

BUCKETS = ("small", "large", "total")


# ── environments ─────────────────────────────────────────────────────────────


@dataclass
class EpisodeRecord:
    episode_return: float
    length: int
    success: bool


class EnvWorker:
    """One training environment with its own RNG stream; auto-resets on a fresh training maze."""

    def __init__(
        self,
        index: int,
        rng: np.random.Generator,
        config: EnvConfig,
        test_hashes: frozenset[str],
    ) -> None:
        self.index = index
        self.rng = rng
        self.config = config
        self.test_hashes = test_hashes
        self.maze_ids: set[str] = set()
        self.episode_return = 0.0
        self.reset()

    def reset(self) -> None:
        maze = sample_training_maze(self.rng, self.test_hashes, self.config.sizes, self.config.loop_fraction)
        self.maze_ids.add(maze.id)
        self.state, self.obs = reset(
            maze,
            self.rng,
            step_limit=self.config.step_limit,
            step_penalty=self.config.step_penalty,
        )
        self.episode_return = 0.0


def make_workers(
    n_envs: int,
    seed_seq: np.random.SeedSequence,
    config: EnvConfig,
    test_hashes: frozenset[str],
) -> list[EnvWorker]:
    return [
        EnvWorker(i, np.random.default_rng(child), config, test_hashes)
        for i, child in enumerate(seed_seq.spawn(n_envs))
    ]


# ── rollouts ─────────────────────────────────────────────────────────────────


@dataclass
class RolloutBuffer:
    """Per step, per env: [t][env]."""

    n_envs: int
    length: int
    observations: list[list[np.ndarray]] = field(default_factory=list)
    actions: list[list[int]] = field(default_factory=list)
    rewards: list[list[float]] = field(default_factory=list)
    dones: list[list[bool]] = field(default_factory=list)
    outputs: list[list[PolicyOutput]] = field(default_factory=list)
    poses: list[list[Pose]] = field(default_factory=list)
    velocities: list[list[Velocity]] = field(default_factory=list)
    bootstrap: np.ndarray | None = None
    finished: list[EpisodeRecord] = field(default_factory=list)

    def append_step(
        self,
        observations: list[np.ndarray],
        actions: list[int],
        rewards: list[float],
        dones: list[bool],
        outputs: list[PolicyOutput],
        poses: list[Pose] | None = None,
        velocities: list[Velocity] | None = None,
    ) -> None:
        for name, column in (("actions", actions), ("rewards", rewards), ("dones", dones), ("outputs", outputs)):
            if len(column) != self.n_envs:
                raise ArgumentError(f"{name} holds {len(column)} entries for {self.n_envs} environments")
        if len(self.actions) >= self.length:
            raise ArgumentError(f"rollout buffer already holds {self.length} steps")
        self.observations.append(observations)
        self.actions.append(actions)
        self.rewards.append(rewards)
        self.dones.append(dones)
        self.outputs.append(outputs)
        self.poses.append(poses or [])
        self.velocities.append(velocities or [])

    @property
    def steps(self) -> int:
        return len(self.actions)

    def __len__(self) -> int:
        return self.steps * self.n_envs

    def reward_array(self) -> np.ndarray:
        return np.asarray(self.rewards, dtype=np.float64).reshape(self.steps, self.n_envs)

    def done_array(self) -> np.ndarray:
        return np.asarray(self.dones, dtype=bool).reshape(self.steps, self.n_envs)

    def value_array(self) -> np.ndarray:
        return np.array([[out.value.item() for out in row] for row in self.outputs], dtype=np.float64)

    def log_prob_array(self) -> np.ndarray:
        out = np.zeros((self.steps, self.n_envs))
        for t, row in enumerate(self.outputs):
            for n, o in enumerate(row):
                logits = o.logits.data.astype(np.float64)
                out[t, n] = logits[self.actions[t][n]] - logsumexp(logits)
        return out

    def clear(self) -> None:
        for name in ("observations", "actions", "rewards", "dones", "outputs", "poses", "velocities", "finished"):
            getattr(self, name).clear()
        self.bootstrap = None


def collect_rollout(
    workers: Sequence[EnvWorker],
    agent: Agent,
    carries: list[AgentCarry],
    length: int,
    rng: np.random.Generator,
) -> tuple[RolloutBuffer, list[AgentCarry]]:
    """Step all envs in lockstep; finished episodes reset immediately with a fresh carry."""
    buffer = RolloutBuffer(n_envs=len(workers), length=length)
    carries = list(carries)
    for _ in range(length):
        row_obs, row_actions, row_rewards, row_dones, row_outputs, row_poses, row_vels = [], [], [], [], [], [], []
        for i, worker in enumerate(workers):
            state = worker.state
            action, out, carry = agent.act(carries[i], worker.obs, state.pose, state.last_velocity, rng)
            try:
                result = step(state, action)
            except EnvStateError as exc:
                raise EnvStateError(f"env {worker.index}: {exc}") from exc
            row_obs.append(worker.obs)
            row_actions.append(action)
            row_rewards.append(result.reward)
            row_dones.append(result.done)
            row_outputs.append(out)
            row_poses.append(state.pose)
            row_vels.append(state.last_velocity)
            worker.episode_return += result.reward
            if result.done:
                buffer.finished.append(
                    EpisodeRecord(
                        episode_return=worker.episode_return,
                        length=result.state.step_count,
                        success=result.info.outcome is Outcome.CORRECT_GOAL,
                    )
                )
                worker.reset()
                carries[i] = agent.initial_carry(worker.state)
            else:
                worker.state = result.state
                worker.obs = result.observation
                carries[i] = carry
        buffer.append_step(row_obs, row_actions, row_rewards, row_dones, row_outputs, row_poses, row_vels)

    bootstrap = np.zeros(len(workers))
    for i, worker in enumerate(workers):
        out, _ = agent.policy(carries[i], worker.obs, worker.state.pose, worker.state.last_velocity)
        bootstrap[i] = out.value.item()
    buffer.bootstrap = bootstrap
    return buffer, [agent.detach_carry(c) for c in carries]


# ── returns and update ───────────────────────────────────────────────────────


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, bootstrap: float, gamma: float) -> np.ndarray:
    """G_t = r_t + γ·G_{t+1}·(1 − done_t), seeded with the bootstrap value."""
    returns = np.zeros(len(rewards), dtype=np.float64)
    running = float(bootstrap)
    for t in reversed(range(len(rewards))):
        running = float(rewards[t]) + gamma * running * (1.0 - float(dones[t]))
        returns[t] = running
    return returns


def compute_returns(buffer: RolloutBuffer, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns and advantages, both [steps × n_envs]."""
    if buffer.bootstrap is None:
        raise ArgumentError("compute_returns needs bootstrap values on the buffer")
    rewards = buffer.reward_array()
    dones = buffer.done_array()
    returns = np.zeros_like(rewards)
    for n in range(buffer.n_envs):
        returns[:, n] = discounted_returns(rewards[:, n], dones[:, n], buffer.bootstrap[n], gamma)
    return returns, returns - buffer.value_array()


@dataclass(frozen=True)
class UpdateStats:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float


def a2c_loss(
    buffer: RolloutBuffer,
    returns: np.ndarray,
    advantages: np.ndarray,
    config: TrainConfig,
) -> tuple[ad.Value, dict[str, float]]:
    """−mean(log π(a)·A) + value_coef·mean((G − V)²) − entropy_coef·mean(H[π]); A is a constant."""
    count = len(buffer)
    terms: list[ad.Value] = []
    policy_total = value_total = entropy_total = 0.0
    for t, row in enumerate(buffer.outputs):
        for n, out in enumerate(row):
            log_probs = out.log_probs()
            advantage = float(advantages[t, n])
            terms.append(ad.scale(ad.pick(log_probs, buffer.actions[t][n]), -advantage / count))
            diff = ad.sub(out.value, ad.constant([returns[t, n]]))
            terms.append(ad.scale(ad.mul(diff, diff), config.value_coef / count))
            neg_entropy = ad.sum_(ad.mul(ad.exp(log_probs), log_probs))
            if config.entropy_coef:
                terms.append(ad.scale(neg_entropy, config.entropy_coef / count))
            policy_total -= float(log_probs.data[buffer.actions[t][n]]) * advantage
            value_total += float(diff.data[0]) ** 2
            entropy_total -= neg_entropy.item()
    loss = ad.add_n(terms)
    parts = {
        "policy_loss": policy_total / count,
        "value_loss": value_total / count,
        "entropy": entropy_total / count,
    }
    return loss, parts


def a2c_update(
    buffer: RolloutBuffer,
    returns: np.ndarray,
    advantages: np.ndarray,
    agent: Agent,
    optimizer: RMSProp,
    config: TrainConfig,
) -> UpdateStats:
    loss, parts = a2c_loss(buffer, returns, advantages, config)
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite loss {loss.item()} (policy {parts['policy_loss']}, value {parts['value_loss']})")
    agent.params.zero_grad()
    ad.backward(loss)
    grad_norm = optimizer.step(agent.params)
    return UpdateStats(loss=loss.item(), grad_norm=grad_norm, **parts)


# ── metrics ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class MetricsRow:
    env_steps: int
    mean_return: float
    success_rate: float
    mean_length: float
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float
    wall_clock: float


METRICS_FIELDS = [f.name for f in fields(MetricsRow)]


class MetricsWriter:
    """Appends MetricsRows to a CSV; rows must arrive in strictly increasing env_steps."""

    def __init__(self, path: Path) -> None:
        self.path = path
        self.last: MetricsRow | None = None
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as f:
            csv.DictWriter(f, fieldnames=METRICS_FIELDS).writeheader()

    def append(self, row: MetricsRow) -> None:
        if self.last is not None and row.env_steps <= self.last.env_steps:
            raise ArgumentError(f"metrics env_steps must increase: {row.env_steps} after {self.last.env_steps}")
        with self.path.open("a", encoding="utf-8", newline="") as f:
            csv.DictWriter(f, fieldnames=METRICS_FIELDS).writerow(
                {k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in asdict(row).items()}
            )
        self.last = row


def _window_stats(window: deque[EpisodeRecord]) -> tuple[float, float, float]:
    if not window:
        return float("nan"), float("nan"), float("nan")
    return (
        float(np.mean([e.episode_return for e in window])),
        float(np.mean([e.success for e in window])),
        float(np.mean([e.length for e in window])),
    )


# ── evaluation ───────────────────────────────────────────────────────────────


@dataclass
class EvalResult:
    counts: dict[str, int]
    successes: dict[str, int]
    lengths: dict[str, list[int]]

    def success_rate(self, bucket: str) -> float | None:
        if not self.counts[bucket]:
            return None
        return self.successes[bucket] / self.counts[bucket]

    def mean_length(self, bucket: str) -> float | None:
        if not self.lengths[bucket]:
            return None
        return float(np.mean(self.lengths[bucket]))

    def as_dict(self) -> dict[str, dict[str, float | int | None]]:
        return {
            "success_rate": {b: self.success_rate(b) for b in BUCKETS},
            "mean_length": {b: self.mean_length(b) for b in BUCKETS},
            "episodes": dict(self.counts),
        }


def run_episode(
    agent: Agent,
    maze: MazeSpec,
    rng: np.random.Generator,
    cap: int,
    step_penalty: float = 0.01,
    greedy: bool = True,
    color: IndicatorColor | None = None,
) -> tuple[EnvState, list[tuple[EnvState, int, PolicyOutput, np.ndarray]]]:
    """One episode; returns the terminal state and (state, action, output, observation) per step."""
    agent.check_maze(maze)
    state, obs = reset(maze, rng, color=color, step_limit=cap, step_penalty=step_penalty)
    carry = agent.initial_carry(state)
    trace: list[tuple[EnvState, int, PolicyOutput, np.ndarray]] = []
    while not state.done:
        action, out, carry = agent.act(carry, obs, state.pose, state.last_velocity, rng, greedy=greedy)
        carry = agent.detach_carry(carry)
        trace.append((state, action, out, obs))
        result = step(state, action)
        state, obs = result.state, result.observation
    return state, trace


def evaluate(
    agent: Agent,
    mazes: Sequence[MazeSpec],
    rng: np.random.Generator,
    cap: int = 500,
    episodes_per_maze: int = 1,
    step_penalty: float = 0.01,
) -> EvalResult:
    counts = {b: 0 for b in BUCKETS}
    successes = {b: 0 for b in BUCKETS}
    lengths: dict[str, list[int]] = {b: [] for b in BUCKETS}
    for maze in mazes:
        agent.check_maze(maze)
    for maze in mazes:
        for _ in range(episodes_per_maze):
            final, _ = run_episode(agent, maze, rng, cap, step_penalty)
            won = final.outcome is Outcome.CORRECT_GOAL
            for bucket in (size_bucket(maze.size), "total"):
                counts[bucket] += 1
                successes[bucket] += int(won)
                lengths[bucket].append(final.step_count)
    return EvalResult(counts=counts, successes=successes, lengths=lengths)


def eval_report(train: EvalResult, test: EvalResult) -> dict[str, float | None]:
    report: dict[str, float | None] = {}
    for prefix, result in (("train", train), ("test", test)):
        for bucket in BUCKETS:
            report[f"{prefix}_{bucket}"] = result.success_rate(bucket)
    return report


# ── training loop ────────────────────────────────────────────────────────────


@dataclass
class TrainResult:
    run_dir: Path
    final_checkpoint: Path
    metrics_path: Path
    report: dict[str, float | None]
    env_steps: int


def _fmt(x: float | None) -> str:
    return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.3f}"


def train_loop(config: RunConfig, run_dir: Path, verbose: bool = False) -> TrainResult:
    train_cfg = config.train
    test_path = Path(config.paths.test_set)
    if not test_path.exists():
        raise ConfigError(f"held-out test set not found: {test_path} (run gen-mazes first)")
    test_set = read_maze_set(test_path)
    test_hashes = frozenset(m.id for m in test_set)
    m = config.agent.map
    too_big = sorted({maze.size for maze in test_set if maze.size > min(m.width, m.height)})
    if too_big and config.agent.variant == "neural_map" and m.addressing == "absolute":
        raise ConfigError(f"held-out set {test_path} has maze sizes {too_big} larger than the {m.width}x{m.height} map")

    run_dir.mkdir(parents=True, exist_ok=True)
    write_run_config(config, run_dir / "run_config.json")
    config_dict = config.to_dict()

    root = np.random.SeedSequence(config.seed)
    init_seq, action_seq, eval_seq, env_seq = root.spawn(4)
    agent = build_agent(config.agent, np.random.default_rng(init_seq))
    optimizer = RMSProp(
        RMSPropConfig(
            learning_rate=train_cfg.learning_rate,
            decay=train_cfg.rmsprop_decay,
            epsilon=train_cfg.rmsprop_epsilon,
            max_grad_norm=train_cfg.max_grad_norm,
        )
    )
    action_rng = np.random.default_rng(action_seq)
    eval_rng = np.random.default_rng(eval_seq)

    workers = make_workers(train_cfg.n_envs, env_seq, config.env, test_hashes)
    carries = [agent.initial_carry(w.state) for w in workers]

    def checkpoint(steps: int) -> Path:
        path = save_checkpoint(run_dir / checkpoint_name(steps), agent.params, optimizer, steps, config.seed, config_dict)
        if verbose:
            print(f"[ok] wrote: {path}")
        return path

    metrics = MetricsWriter(run_dir / "metrics.csv")
    history_path = run_dir / "eval_history.jsonl"
    history_path.write_text("", encoding="utf-8")
    window: deque[EpisodeRecord] = deque(maxlen=train_cfg.metrics_window)

    env_steps = 0
    last_ckpt = checkpoint(0)
    next_eval = train_cfg.eval_interval
    start = time.perf_counter()
    if verbose:
        print(
            f"[info] agent={agent.variant} params={sum(p.value.size for p in agent.params)} "
            f"envs={train_cfg.n_envs} steps={train_cfg.total_steps} test_mazes={len(test_set)}"
        )

    per_update = train_cfg.n_envs * train_cfg.rollout_length
    update_idx = 0
    while env_steps < train_cfg.total_steps:
        buffer, carries = collect_rollout(workers, agent, carries, train_cfg.rollout_length, action_rng)
        env_steps += per_update
        update_idx += 1
        window.extend(buffer.finished)
        returns, advantages = compute_returns(buffer, train_cfg.gamma)
        if agent.trainable:
            try:
                stats = a2c_update(buffer, returns, advantages, agent, optimizer, train_cfg)
            except NumericError as exc:
                raise NumericError(f"{exc}; last metrics row: {metrics.last}") from exc
        else:
            stats = UpdateStats(loss=0.0, policy_loss=0.0, value_loss=0.0, entropy=0.0, grad_norm=0.0)
        mean_return, success_rate, mean_length = _window_stats(window)
        row = MetricsRow(
            env_steps=env_steps,
            mean_return=mean_return,
            success_rate=success_rate,
            mean_length=mean_length,
            policy_loss=stats.policy_loss,
            value_loss=stats.value_loss,
            entropy=stats.entropy,
            grad_norm=stats.grad_norm,
            wall_clock=time.perf_counter() - start,
        )
        metrics.append(row)
        if verbose and update_idx % 50 == 0:
            print(
                f"[update {update_idx}] env_steps={env_steps} return={_fmt(mean_return)} "
                f"success={_fmt(success_rate)} entropy={stats.entropy:.3f} grad_norm={stats.grad_norm:.3f}"
            )
        if env_steps >= next_eval:
            prefix = test_set[: train_cfg.eval_mazes]
            result = evaluate(agent, prefix, eval_rng, cap=train_cfg.eval_cap, step_penalty=config.env.step_penalty)
            entry = {"env_steps": env_steps, **{f"test_{b}": result.success_rate(b) for b in BUCKETS}}
            with history_path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(entry) + "\n")
            if verbose:
                print(f"[eval] env_steps={env_steps} test_total={_fmt(result.success_rate('total'))}")
            last_ckpt = checkpoint(env_steps)
            while next_eval <= env_steps:
                next_eval += train_cfg.eval_interval

    if last_ckpt.name != checkpoint_name(env_steps):
        last_ckpt = checkpoint(env_steps)

    seen = set().union(*(w.maze_ids for w in workers))
    leaked = seen & test_hashes
    if leaked:
        raise NeuralMapError(f"{len(leaked)} held-out mazes were sampled for training")
    if verbose:
        print(f"[info] training mazes: {len(seen)} unique, 0 in the held-out set")

    train_sample_rng = np.random.default_rng(eval_seq.spawn(1)[0])
    train_mazes = [
        sample_training_maze(train_sample_rng, test_hashes, config.env.sizes, config.env.loop_fraction)
        for _ in range(train_cfg.train_eval_mazes)
    ]
    train_result = evaluate(agent, train_mazes, eval_rng, cap=train_cfg.eval_cap, step_penalty=config.env.step_penalty)
    test_result = evaluate(agent, test_set, eval_rng, cap=train_cfg.eval_cap, step_penalty=config.env.step_penalty)
    report = eval_report(train_result, test_result)
    report_path = run_dir / "eval_report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if verbose:
        print(f"[ok] wrote: {report_path}")
    return TrainResult(
        run_dir=run_dir,
        final_checkpoint=last_ckpt,
        metrics_path=metrics.path,
        report=report,
        env_steps=env_steps,
    )
