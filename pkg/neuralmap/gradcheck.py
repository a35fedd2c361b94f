"""
Finite-difference gradient checks in 64-bit.

Each registered case builds a scalar loss over a set of leaf Values. The
analytic gradient from `backward` is compared with central differences
(h = 1e-5) on a sample of entries per leaf:

  rel_err = |analytic − numeric| / max(|analytic|, |numeric|, 1e-3)

Smooth single ops must stay within 1e-6, composed cases within 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .agents import LSTMState, build_embedding, build_lstm, embed_observation, lstm_cell, mqn_lookup
from .autodiff import ParameterStore, Value
from .config import AgentConfig
from .neural_map import (
    ADDRESSING_VARIANTS,
    CONTEXT_VARIANTS,
    WRITE_VARIANTS,
    MapState,
    NeuralMapConfig,
    Pose,
    Velocity,
    build_map_parameters,
    map_step,
)

STEP = 1e-5
REL_FLOOR = 1e-3
SMOOTH_TOL = 1e-6
COMPOSED_TOL = 1e-4

LossBuilder = Callable[[], Value]
CaseFactory = Callable[[np.random.Generator], tuple[LossBuilder, list[tuple[str, Value]]]]


@dataclass(frozen=True)
class GradCase:
    name: str
    factory: CaseFactory
    tolerance: float = SMOOTH_TOL


@dataclass(frozen=True)
class GradcheckRow:
    case: str
    max_rel_error: float
    worst_leaf: str
    worst_index: tuple[int, ...]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Value:
    return Value(rng.normal(scale=scale, size=shape), trainable=True)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Value:
    x = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Value(x, trainable=True)


def check_case(case: GradCase, rng: np.random.Generator, max_entries: int = 6) -> GradcheckRow:
    with ad.precision(np.float64):
        loss_fn, leaves = case.factory(rng)
        for _, leaf in leaves:
            leaf.zero_grad()
        ad.backward(loss_fn())
        analytic = {label: leaf.grad.copy() for label, leaf in leaves}

        worst = (0.0, "", ())
        for label, leaf in leaves:
            flat = leaf.data.reshape(-1)
            n = flat.size
            picks = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
            for k in picks:
                k = int(k)
                saved = flat[k]
                flat[k] = saved + STEP
                up = loss_fn().item()
                flat[k] = saved - STEP
                down = loss_fn().item()
                flat[k] = saved
                numeric = (up - down) / (2 * STEP)
                a = float(analytic[label].reshape(-1)[k])
                err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
                if err > worst[0] or not worst[1]:
                    worst = (err, label, tuple(int(i) for i in np.unravel_index(k, leaf.shape)))
    return GradcheckRow(
        case=case.name,
        max_rel_error=worst[0],
        worst_leaf=worst[1],
        worst_index=worst[2],
        tolerance=case.tolerance,
    )


# ── single-op cases ──────────────────────────────────────────────────────────


def _unary(op: Callable[[Value], Value], *shape: int, kinked: bool = False) -> CaseFactory:
    def factory(rng: np.random.Generator):
        x = _away_from_zero(rng, *shape) if kinked else _leaf(rng, *shape)
        # random linear functional, so no gradient entry is trivially symmetric
        weights = ad.constant(rng.normal(size=op(x).shape))
        return (lambda: ad.sum_(ad.mul(op(x), weights))), [("x", x)]

    return factory


def _binary(op: Callable[[Value, Value], Value], *shape: int) -> CaseFactory:
    def factory(rng: np.random.Generator):
        a, b = _leaf(rng, *shape), _leaf(rng, *shape)
        weights = ad.constant(rng.normal(size=shape))
        return (lambda: ad.sum_(ad.mul(op(a, b), weights))), [("a", a), ("b", b)]

    return factory


def _with_weights(build: Callable[[], Value], rng: np.random.Generator) -> LossBuilder:
    weights = ad.constant(rng.normal(size=build().shape))
    return lambda: ad.sum_(ad.mul(build(), weights))


def _matmul(rng):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 3, 2)
    return _with_weights(lambda: ad.matmul(a, b), rng), [("a", a), ("b", b)]


def _conv2d(rng):
    x, k, bias = _leaf(rng, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    return _with_weights(lambda: ad.conv2d(x, k, bias), rng), [("input", x), ("kernels", k), ("bias", bias)]


def _linear(rng):
    x, w, bias = _leaf(rng, 6), _leaf(rng, 6, 4), _leaf(rng, 4)
    return _with_weights(lambda: ad.linear(x, w, bias), rng), [("x", x), ("weight", w), ("bias", bias)]


def _concat(rng):
    a, b, c = _leaf(rng, 3), _leaf(rng, 4), _leaf(rng, 2)
    return _with_weights(lambda: ad.concat([a, b, c]), rng), [("a", a), ("b", b), ("c", c)]


def _slice(rng):
    x = _leaf(rng, 4, 3, 3)
    return _with_weights(lambda: ad.slice_(x, 1, 3), rng), [("x", x)]


def _softmax_positions(rng):
    x = _leaf(rng, 9, 9)
    return _with_weights(lambda: ad.softmax_positions(x), rng), [("scores", x)]


def _log_softmax(rng):
    x = _leaf(rng, 3)
    return _with_weights(lambda: ad.log_softmax(x), rng), [("logits", x)]


def _channel_dot(rng):
    m, q = _leaf(rng, 3, 4, 4), _leaf(rng, 3)
    return _with_weights(lambda: ad.channel_dot(m, q), rng), [("memory", m), ("query", q)]


def _weighted_sum(rng):
    m = _leaf(rng, 3, 5, 5)
    w = Value(rng.dirichlet(np.ones(25)).reshape(5, 5), trainable=True)
    return _with_weights(lambda: ad.weighted_sum(m, w), rng), [("memory", m), ("weights", w)]


def _scatter_write(rng):
    m, v = _leaf(rng, 3, 4, 4), _leaf(rng, 3)
    return _with_weights(lambda: ad.scatter_write(m, (2, 1), v), rng), [("memory", m), ("vec", v)]


def _shift2d(rng):
    m = _leaf(rng, 2, 4, 4)
    return _with_weights(lambda: ad.shift2d(m, (2, 1)), rng), [("memory", m)]


def _crop2d(rng):
    m = _leaf(rng, 2, 5, 5)
    return _with_weights(lambda: ad.crop2d(m, (0, 3), 3), rng), [("memory", m)]


def _column(rng):
    m = _leaf(rng, 3, 4, 4)
    return _with_weights(lambda: ad.column(m, (3, 0)), rng), [("memory", m)]


def _pick(rng):
    x = _leaf(rng, 5)
    return (lambda: ad.scale(ad.pick(x, 3), 2.5)), [("x", x)]


def _add_n(rng):
    parts = [_leaf(rng, 4) for _ in range(3)]
    return _with_weights(lambda: ad.add_n(parts), rng), [(f"part{i}", p) for i, p in enumerate(parts)]


def _sum_of_squares(rng):
    x = _leaf(rng, 6)
    return (lambda: ad.sum_(ad.mul(x, x))), [("x", x)]


# ── composed cases ───────────────────────────────────────────────────────────


def _small_map_config(context: str, write: str, addressing: str) -> NeuralMapConfig:
    return NeuralMapConfig(
        channels=4,
        height=5,
        width=5,
        context=context,
        write=write,
        addressing=addressing,
        conv_channels=2,
        read_hidden=6,
        write_hidden=6,
        activation="tanh",
    )


def _map_step_case(context: str, write: str, addressing: str) -> CaseFactory:
    def factory(rng: np.random.Generator):
        config = _small_map_config(context, write, addressing)
        store = ParameterStore()
        build_map_parameters(store, config, rng)
        memory = _leaf(rng, config.channels, config.height, config.width, scale=0.5)
        s = _leaf(rng, config.channels)
        pose = Pose(1, 3)
        velocity = Velocity(1, 0)
        w_o = ad.constant(rng.normal(size=config.output_dim))
        w_m = ad.constant(rng.normal(size=(config.channels, config.height, config.width)))

        def loss() -> Value:
            out = map_step(MapState(memory), s, config, store, pose=pose, velocity=velocity)
            return ad.add(ad.sum_(ad.mul(out.o, w_o)), ad.sum_(ad.mul(out.new_map.memory, w_m)))

        leaves = [("map", memory), ("s", s)] + [(p.name, p.value) for p in store]
        return loss, leaves

    return factory


def _unrolled_map_case(rng: np.random.Generator):
    """Three chained map steps; gradient must reach every step's embedding."""
    config = _small_map_config("plain", "gru", "absolute")
    store = ParameterStore()
    build_map_parameters(store, config, rng)
    embeddings = [_leaf(rng, config.channels) for _ in range(3)]
    poses = [Pose(1, 1), Pose(1, 2), Pose(2, 2)]
    weights = ad.constant(rng.normal(size=config.output_dim))

    def loss() -> Value:
        state = MapState.zeros(config)
        out = None
        for s, pose in zip(embeddings, poses, strict=True):
            out = map_step(state, s, config, store, pose=pose)
            state = out.new_map
        return ad.sum_(ad.mul(out.o, weights))

    leaves = [(f"s{i}", s) for i, s in enumerate(embeddings)] + [(p.name, p.value) for p in store]
    return loss, leaves


def _embedding_case(rng: np.random.Generator):
    store = ParameterStore()
    build_embedding(store, AgentConfig(variant="lstm", embed_hidden=8, embed_dim=4), rng)
    obs = Value(rng.integers(0, 2, size=(5, 15, 3)), trainable=True)
    weights = ad.constant(rng.normal(size=4))

    def loss() -> Value:
        return ad.sum_(ad.mul(embed_observation(obs, store, "tanh"), weights))

    return loss, [("obs", obs)] + [(p.name, p.value) for p in store]


def _lstm_case(rng: np.random.Generator):
    store = ParameterStore()
    build_lstm(store, "lstm", 3, 4, rng)
    x, h, c = _leaf(rng, 3), _leaf(rng, 4), _leaf(rng, 4)
    wh, wc = ad.constant(rng.normal(size=4)), ad.constant(rng.normal(size=4))

    def loss() -> Value:
        out = lstm_cell(store, "lstm", x, LSTMState(h, c))
        return ad.add(ad.sum_(ad.mul(out.h, wh)), ad.sum_(ad.mul(out.c, wc)))

    return loss, [("x", x), ("h", h), ("c", c)] + [(p.name, p.value) for p in store]


def _mqn_case(rng: np.random.Generator):
    store = ParameterStore()
    for name in ("key", "value", "query"):
        store.add(f"mqn/{name}", rng.normal(scale=0.5, size=(4, 4)))
    buffer = tuple(_leaf(rng, 4) for _ in range(3))
    current = _leaf(rng, 4)
    weights = ad.constant(rng.normal(size=8))

    def loss() -> Value:
        return ad.sum_(ad.mul(mqn_lookup(buffer, current, store)[0], weights))

    leaves = [(f"slot{i}", e) for i, e in enumerate(buffer)] + [("current", current)]
    return loss, leaves + [(p.name, p.value) for p in store]


def registered_cases() -> list[GradCase]:
    cases = [
        GradCase("matmul", _matmul),
        GradCase("conv2d", _conv2d),
        GradCase("linear", _linear),
        GradCase("sigmoid", _unary(ad.sigmoid, 32)),
        GradCase("tanh", _unary(ad.tanh, 32)),
        GradCase("relu", _unary(ad.relu, 32, kinked=True)),
        GradCase("exp", _unary(ad.exp, 8)),
        GradCase("scale", _unary(lambda x: ad.scale(x, -1.7), 8)),
        GradCase("reshape", _unary(lambda x: ad.reshape(x, (2, 6)), 12)),
        GradCase("add", _binary(ad.add, 6)),
        GradCase("sub", _binary(ad.sub, 6)),
        GradCase("mul", _binary(ad.mul, 6)),
        GradCase("add_n", _add_n),
        GradCase("sum_of_squares", _sum_of_squares),
        GradCase("concat", _concat),
        GradCase("slice", _slice),
        GradCase("pick", _pick),
        GradCase("softmax_positions", _softmax_positions),
        GradCase("log_softmax", _log_softmax),
        GradCase("channel_dot", _channel_dot),
        GradCase("weighted_sum", _weighted_sum),
        GradCase("scatter_write", _scatter_write),
        GradCase("shift2d", _shift2d),
        GradCase("crop2d", _crop2d),
        GradCase("column", _column),
        GradCase("embed_observation", _embedding_case, COMPOSED_TOL),
        GradCase("lstm_cell", _lstm_case, COMPOSED_TOL),
        GradCase("mqn_lookup", _mqn_case, COMPOSED_TOL),
        GradCase("map_step/unrolled", _unrolled_map_case, COMPOSED_TOL),
    ]
    for context in CONTEXT_VARIANTS:
        for write in WRITE_VARIANTS:
            for addressing in ADDRESSING_VARIANTS:
                cases.append(
                    GradCase(
                        f"map_step/{context}/{write}/{addressing}",
                        _map_step_case(context, write, addressing),
                        COMPOSED_TOL,
                    )
                )
    return cases


def run_suite(seed: int = 0, cases: list[GradCase] | None = None) -> list[GradcheckRow]:
    seq = np.random.SeedSequence(seed)
    cases = registered_cases() if cases is None else cases
    return [check_case(case, np.random.default_rng(child)) for case, child in zip(cases, seq.spawn(len(cases)), strict=True)]


def format_table(rows: list[GradcheckRow]) -> str:
    width = max([len(r.case) for r in rows] + [4])
    lines = [f"{'case':<{width}}  {'max_rel_err':>11}  {'tol':>7}  status  worst"]
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        lines.append(
            f"{r.case:<{width}}  {r.max_rel_error:>11.3e}  {r.tolerance:>7.0e}  {status:<6}  {r.worst_leaf}{list(r.worst_index)}"
        )
    return "\n".join(lines)
