"""
Minimal reverse-mode automatic differentiation on numpy arrays.

The tape is rebuilt on every forward pass (define-by-run). Each operation
returns a new Value holding its parents and a closure that accumulates the
parents' gradients from the output gradient; `backward` walks the graph once in
reverse topological order.

Only the shapes the memory, agents and trainer need are supported; there is no
general broadcasting.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

from .errors import ArgumentError, BoundsError, DimensionError, NumericError

_DTYPE_STACK: list[type] = [np.float32]


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE_STACK[-1])


@contextlib.contextmanager
def precision(dtype: type | np.dtype) -> Iterator[None]:
    """Temporarily switch the dtype of newly created Values (64-bit for gradient checks)."""
    _DTYPE_STACK.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


BackwardFn = Callable[[np.ndarray], None]


class Value:
    """A node in the differentiation graph: data, gradient of identical shape, and provenance."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "trainable")

    def __init__(
        self,
        data: np.ndarray | float | Sequence[float],
        parents: tuple["Value", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
        trainable: bool = False,
        copy: bool = True,
    ) -> None:
        arr = np.array(data, dtype=default_dtype(), copy=copy) if copy else np.asarray(data, dtype=default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() on non-scalar Value of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Value":
        return Value(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op})"

    def __add__(self, other: "Value") -> "Value":
        return add(self, other)

    def __sub__(self, other: "Value") -> "Value":
        return sub(self, other)

    def __mul__(self, other: "Value") -> "Value":
        return mul(self, other)

    def __neg__(self) -> "Value":
        return scale(self, -1.0)


def _node(data: np.ndarray, parents: tuple[Value, ...], backward_fn: BackwardFn, op: str) -> Value:
    return Value(data, parents=parents, backward_fn=backward_fn, op=op, copy=False)


def constant(data: np.ndarray | float | Sequence[float]) -> Value:
    return Value(data)


def _same_shape(op: str, a: Value, b: Value) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ── graph traversal ──────────────────────────────────────────────────────────


def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Value) -> None:
    """Populate `.grad` of every Value reachable from the scalar `root` with d(root)/d(value)."""
    if root.size != 1:
        raise ArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    root.grad[...] = 1
    for node in reversed(_topological_order(root)):
        if node.backward_fn is not None:
            node.backward_fn(node.grad)


# ── linear algebra ───────────────────────────────────────────────────────────


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g: np.ndarray) -> None:
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    return _node(a.data @ b.data, (a, b), _backward, "matmul")


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    if math.prod(shape) != x.size:
        raise DimensionError(f"reshape: {x.shape} has {x.size} elements, target {shape}")

    def _backward(g: np.ndarray) -> None:
        x.grad += g.reshape(x.shape)

    return _node(x.data.reshape(shape), (x,), _backward, "reshape")


def project(x: Value, weight: Value) -> Value:
    """Vector x [k] through weight [k×n], no bias."""
    if x.data.ndim != 1:
        raise DimensionError(f"project: expected a vector input, got {x.shape}")
    out = matmul(reshape(x, (1, x.size)), weight)
    return reshape(out, (weight.shape[1],))


def linear(x: Value, weight: Value, bias: Value) -> Value:
    """x [k] through weight [k×n] plus bias [n]."""
    return add(project(x, weight), bias)


def conv2d(inp: Value, kernels: Value, bias: Value) -> Value:
    """3×3 cross-correlation, stride 1, zero padding 1, plus per-channel bias."""
    if inp.data.ndim != 3 or kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: input {inp.shape}, kernels {kernels.shape}")
    if kernels.shape[1] != inp.shape[0]:
        raise DimensionError(f"conv2d: channel mismatch, input {inp.shape} vs kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} vs kernels {kernels.shape}")
    _, height, width = inp.shape
    padded = np.pad(inp.data, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (C_in, H, W, 3, 3)
    out = np.einsum("chwij,ocij->ohw", windows, kernels.data, optimize=True)
    out += bias.data[:, None, None]

    def _backward(g: np.ndarray) -> None:
        kernels.grad += np.einsum("ohw,chwij->ocij", g, windows, optimize=True)
        bias.grad += g.sum(axis=(1, 2))
        grad_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                grad_padded[:, i : i + height, j : j + width] += np.einsum(
                    "oc,ohw->chw", kernels.data[:, :, i, j], g, optimize=True
                )
        inp.grad += grad_padded[:, 1:-1, 1:-1]

    return _node(out, (inp, kernels, bias), _backward, "conv2d")


# ── elementwise ──────────────────────────────────────────────────────────────


def add(a: Value, b: Value) -> Value:
    _same_shape("add", a, b)

    def _backward(g: np.ndarray) -> None:
        a.grad += g
        b.grad += g

    return _node(a.data + b.data, (a, b), _backward, "add")


def sub(a: Value, b: Value) -> Value:
    _same_shape("sub", a, b)

    def _backward(g: np.ndarray) -> None:
        a.grad += g
        b.grad -= g

    return _node(a.data - b.data, (a, b), _backward, "sub")


def mul(a: Value, b: Value) -> Value:
    _same_shape("mul", a, b)

    def _backward(g: np.ndarray) -> None:
        a.grad += g * b.data
        b.grad += g * a.data

    return _node(a.data * b.data, (a, b), _backward, "mul")


def scale(x: Value, factor: float) -> Value:
    def _backward(g: np.ndarray) -> None:
        x.grad += g * factor

    return _node(x.data * factor, (x,), _backward, "scale")


def sigmoid(x: Value) -> Value:
    s = expit(x.data)

    def _backward(g: np.ndarray) -> None:
        x.grad += g * s * (1 - s)

    return _node(s, (x,), _backward, "sigmoid")


def tanh(x: Value) -> Value:
    t = np.tanh(x.data)

    def _backward(g: np.ndarray) -> None:
        x.grad += g * (1 - t * t)

    return _node(t, (x,), _backward, "tanh")


def relu(x: Value) -> Value:
    mask = x.data > 0

    def _backward(g: np.ndarray) -> None:
        x.grad += g * mask

    return _node(x.data * mask, (x,), _backward, "relu")


def exp(x: Value) -> Value:
    e = np.exp(x.data)

    def _backward(g: np.ndarray) -> None:
        x.grad += g * e

    return _node(e, (x,), _backward, "exp")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def pointwise(kind: str, *args: Value, factor: float | None = None) -> Value:
    """Dispatch by name: sigmoid | tanh | relu | add | sub | mul | scale."""
    if kind in _UNARY and len(args) == 1:
        return _UNARY[kind](args[0])
    if kind in _BINARY and len(args) == 2:
        return _BINARY[kind](args[0], args[1])
    if kind == "scale" and len(args) == 1 and factor is not None:
        return scale(args[0], factor)
    raise ArgumentError(f"pointwise: unsupported kind {kind!r} with {len(args)} argument(s)")


def activation(name: str) -> Callable[[Value], Value]:
    if name not in _UNARY:
        raise ArgumentError(f"unknown activation {name!r}")
    return _UNARY[name]


# ── reductions and structure ─────────────────────────────────────────────────


def sum_(x: Value) -> Value:
    def _backward(g: np.ndarray) -> None:
        x.grad += g[0]

    return _node(np.array([x.data.sum()], dtype=x.data.dtype), (x,), _backward, "sum")


def add_n(parts: Sequence[Value]) -> Value:
    if not parts:
        raise ArgumentError("add_n: empty part list")
    for p in parts[1:]:
        _same_shape("add_n", parts[0], p)
    total = np.sum([p.data for p in parts], axis=0)

    def _backward(g: np.ndarray) -> None:
        for p in parts:
            p.grad += g

    return _node(total, tuple(parts), _backward, "add_n")


def concat(parts: Sequence[Value], axis: int = 0) -> Value:
    if not parts:
        raise ArgumentError("concat: empty part list")
    ndim = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ndim:
            raise DimensionError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
        rest = tuple(d for i, d in enumerate(p.shape) if i != axis)
        ref = tuple(d for i, d in enumerate(parts[0].shape) if i != axis)
        if rest != ref:
            raise DimensionError(f"concat: incompatible shapes {parts[0].shape} vs {p.shape} on axis {axis}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g: np.ndarray) -> None:
        for p, piece in zip(parts, np.split(g, bounds, axis=axis), strict=True):
            p.grad += piece

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), _backward, "concat")


def slice_(x: Value, start: int, stop: int, axis: int = 0) -> Value:
    if not 0 <= start < stop <= x.shape[axis]:
        raise BoundsError(f"slice [{start}:{stop}] outside axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)

    def _backward(g: np.ndarray) -> None:
        x.grad[key] += g

    return _node(x.data[key].copy(), (x,), _backward, "slice")


def pick(x: Value, index: int) -> Value:
    """Scalar element `index` of a vector."""
    if x.data.ndim != 1 or not 0 <= index < x.size:
        raise BoundsError(f"pick: index {index} outside {x.shape}")

    def _backward(g: np.ndarray) -> None:
        x.grad[index] += g[0]

    return _node(x.data[index : index + 1].copy(), (x,), _backward, "pick")


# ── attention ────────────────────────────────────────────────────────────────


def _check_finite(op: str, x: Value) -> None:
    if np.isnan(x.data).any():
        raise NumericError(f"{op}: NaN in input of shape {x.shape}")


def softmax(x: Value) -> Value:
    """Softmax over every element of x, max-subtracted."""
    _check_finite("softmax", x)
    shifted = np.exp(x.data - x.data.max())
    y = shifted / shifted.sum()

    def _backward(g: np.ndarray) -> None:
        x.grad += y * (g - np.sum(g * y))

    return _node(y, (x,), _backward, "softmax")


def softmax_positions(scores: Value) -> Value:
    if scores.data.ndim != 2:
        raise DimensionError(f"softmax_positions: expected H×W scores, got {scores.shape}")
    return softmax(scores)


def log_softmax(logits: Value) -> Value:
    _check_finite("log_softmax", logits)
    out = logits.data - logsumexp(logits.data)

    def _backward(g: np.ndarray) -> None:
        logits.grad += g - np.exp(out) * g.sum()

    return _node(out, (logits,), _backward, "log_softmax")


def channel_dot(memory: Value, query: Value) -> Value:
    """Scores q · M^(x,y) at every position: [C×H×W], [C] -> [H×W]."""
    if memory.data.ndim != 3 or query.shape != (memory.shape[0],):
        raise DimensionError(f"channel_dot: memory {memory.shape} vs query {query.shape}")

    def _backward(g: np.ndarray) -> None:
        memory.grad += query.data[:, None, None] * g[None, :, :]
        query.grad += np.einsum("chw,hw->c", memory.data, g)

    return _node(np.einsum("chw,c->hw", memory.data, query.data), (memory, query), _backward, "channel_dot")


def weighted_sum(memory: Value, weights: Value) -> Value:
    """Σ_(x,y) weights^(x,y) M^(x,y): [C×H×W], [H×W] -> [C]."""
    if memory.data.ndim != 3 or weights.shape != memory.shape[1:]:
        raise DimensionError(f"weighted_sum: memory {memory.shape} vs weights {weights.shape}")

    def _backward(g: np.ndarray) -> None:
        memory.grad += g[:, None, None] * weights.data[None, :, :]
        weights.grad += np.einsum("c,chw->hw", g, memory.data)

    return _node(np.einsum("chw,hw->c", memory.data, weights.data), (memory, weights), _backward, "weighted_sum")


# ── spatial memory ───────────────────────────────────────────────────────────


def _check_position(op: str, memory: Value, pos: tuple[int, int]) -> tuple[int, int]:
    if memory.data.ndim != 3:
        raise DimensionError(f"{op}: expected C×H×W memory, got {memory.shape}")
    x, y = int(pos[0]), int(pos[1])
    _, height, width = memory.shape
    if not (0 <= x < width and 0 <= y < height):
        raise BoundsError(f"{op}: position {(x, y)} outside {width}×{height} map")
    return x, y


def column(memory: Value, pos: tuple[int, int]) -> Value:
    """The feature vector M^(x,y)."""
    x, y = _check_position("column", memory, pos)

    def _backward(g: np.ndarray) -> None:
        memory.grad[:, y, x] += g

    return _node(memory.data[:, y, x].copy(), (memory,), _backward, "column")


def scatter_write(memory: Value, pos: tuple[int, int], vec: Value) -> Value:
    """Copy of memory with column (x, y) replaced by vec; the input is left untouched."""
    x, y = _check_position("scatter_write", memory, pos)
    if vec.shape != (memory.shape[0],):
        raise DimensionError(f"scatter_write: vector {vec.shape} vs memory {memory.shape}")
    out = memory.data.copy()
    out[:, y, x] = vec.data

    def _backward(g: np.ndarray) -> None:
        passthrough = g.copy()
        passthrough[:, y, x] = 0
        memory.grad += passthrough
        vec.grad += g[:, y, x]

    return _node(out, (memory, vec), _backward, "scatter_write")


def _shift_array(arr: np.ndarray, du: int, dv: int) -> np.ndarray:
    out = np.zeros_like(arr)
    _, height, width = arr.shape
    if abs(du) >= width or abs(dv) >= height:
        return out
    src_x = slice(max(0, -du), width - max(0, du))
    dst_x = slice(max(0, du), width - max(0, -du))
    src_y = slice(max(0, -dv), height - max(0, dv))
    dst_y = slice(max(0, dv), height - max(0, -dv))
    out[:, dst_y, dst_x] = arr[:, src_y, src_x]
    return out


def shift2d(memory: Value, delta: tuple[int, int]) -> Value:
    """Translate by (du, dv): out^(x+du, y+dv) = in^(x, y); vacated cells are zero."""
    if memory.data.ndim != 3:
        raise DimensionError(f"shift2d: expected C×H×W memory, got {memory.shape}")
    du, dv = int(delta[0]), int(delta[1])

    def _backward(g: np.ndarray) -> None:
        memory.grad += _shift_array(g, -du, -dv)

    return _node(_shift_array(memory.data, du, dv), (memory,), _backward, "shift2d")


def crop2d(memory: Value, center: tuple[int, int], size: int) -> Value:
    """Odd size×size window of the map centred on `center`, zero outside the map."""
    x, y = _check_position("crop2d", memory, center)
    if size < 1 or size % 2 == 0:
        raise ArgumentError(f"crop2d: window size must be odd, got {size}")
    radius = size // 2
    _, height, width = memory.shape
    padded = np.pad(memory.data, ((0, 0), (radius, radius), (radius, radius)))
    out = padded[:, y : y + size, x : x + size].copy()

    def _backward(g: np.ndarray) -> None:
        grad_padded = np.zeros_like(padded)
        grad_padded[:, y : y + size, x : x + size] += g
        memory.grad += grad_padded[:, radius : radius + height, radius : radius + width]

    return _node(out, (memory,), _backward, "crop2d")


# ── parameters ───────────────────────────────────────────────────────────────


@dataclass
class Parameter:
    name: str
    value: Value


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


class ParameterStore:
    """Named trainable Values of one model; names are unique and insertion-ordered."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, array: np.ndarray) -> Value:
        if name in self._params:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        value = Value(array, trainable=True)
        self._params[name] = Parameter(name=name, value=value)
        return value

    def add_linear(self, prefix: str, n_in: int, n_out: int, rng: np.random.Generator, bias: float = 0.0) -> None:
        self.add(f"{prefix}/weight", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.add(f"{prefix}/bias", np.full(n_out, bias))

    def add_conv(self, prefix: str, c_in: int, c_out: int, rng: np.random.Generator) -> None:
        self.add(f"{prefix}/kernels", glorot_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9))
        self.add(f"{prefix}/bias", np.zeros(c_out))

    def linear(self, prefix: str, x: Value) -> Value:
        return linear(x, self[f"{prefix}/weight"], self[f"{prefix}/bias"])

    def conv(self, prefix: str, x: Value) -> Value:
        return conv2d(x, self[f"{prefix}/kernels"], self[f"{prefix}/bias"])

    def __getitem__(self, name: str) -> Value:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.value.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.data.copy() for name, p in self._params.items()}

    def assign(self, name: str, array: np.ndarray) -> None:
        value = self[name]
        if value.shape != tuple(array.shape):
            raise DimensionError(f"assign {name!r}: {array.shape} vs {value.shape}")
        value.data[...] = array


# ── optimizer ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class RMSPropConfig:
    learning_rate: float = 7e-4
    decay: float = 0.99
    epsilon: float = 1e-5
    max_grad_norm: float | None = 40.0


class RMSProp:
    """Squared-gradient moving average per parameter, optional global-norm clipping first."""

    def __init__(self, config: RMSPropConfig) -> None:
        self.config = config
        self.square_avg: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: Iterable[Parameter]) -> float:
        params = list(params)
        for p in params:
            if not np.all(np.isfinite(p.value.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        grad_norm = math.sqrt(sum(float(np.sum(np.square(p.value.grad, dtype=np.float64))) for p in params))
        clip = 1.0
        if self.config.max_grad_norm is not None and grad_norm > self.config.max_grad_norm:
            clip = self.config.max_grad_norm / (grad_norm + 1e-6)
        decay = self.config.decay
        for p in params:
            g = p.value.grad * clip
            sq = self.square_avg.get(p.name)
            if sq is None:
                sq = self.square_avg[p.name] = np.zeros_like(p.value.data)
            sq *= decay
            sq += (1 - decay) * g * g
            p.value.data -= self.config.learning_rate * g / np.sqrt(sq + self.config.epsilon)
            p.value.zero_grad()
        self.steps += 1
        return grad_norm


def optimizer_step(params: Iterable[Parameter], optimizer: RMSProp) -> float:
    return optimizer.step(params)
