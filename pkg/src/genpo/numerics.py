"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: exactly the primitives needed to train little MLPs and
to differentiate through the coupled-flow recursions (affine layers,
elementwise nonlinearities, reductions, concat/slice/repeat). Everything is
double precision and C-order; there is no broadcasting beyond scalars.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "GradTape",
    "Mlp",
    "NumericError",
    "Tensor",
    "affine",
    "apply_mlp",
    "as_tensor",
    "clamp",
    "concat_cols",
    "exp",
    "init_mlp",
    "log",
    "make_rng",
    "mean",
    "minimum",
    "mish",
    "mlp_parameters",
    "mlp_with_parameters",
    "no_grad",
    "repeat_rows",
    "reshape",
    "row_sum",
    "sample_standard_normal",
    "slice_cols",
    "softplus",
    "square",
    "tanh",
    "tensor_sum",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """An operation produced NaN/Inf from finite inputs."""


class ConfigError(ValueError):
    """A configuration value violates its documented range."""


class ContractError(ValueError):
    """A caller broke a documented precondition."""


_uid_counter = itertools.count(1)


class Tensor:
    """A float64 array value, optionally tracked on the active tape.

    Tensors are treated as immutable snapshots: operations return fresh
    tensors and never write through ``data``.
    """

    __slots__ = ("data", "uid")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # arithmetic sugar; wired to the primitive functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division is only defined by a nonzero constant")
        return mul(self, 1.0 / float(other))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# gradient tape

_ACTIVE_TAPE: "GradTape | None" = None


class GradTape:
    """Records primitive operations; gradients are accumulated by replaying
    the record in reverse (recording order is a topological order, so the
    reverse visit is valid)."""

    def __init__(self):
        # (output uid, input uids, vjp(grad_out) -> per-input grads or None)
        self._ops: list[tuple[int, tuple[int, ...], Callable]] = []
        self._spent = False

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("gradient tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of a scalar ``loss`` with respect to ``sources``.

        Sources that do not influence the loss get zero gradients. One
        backward pass per tape.
        """
        if loss.ndim != 0:
            raise ContractError(f"backward seed must be scalar, got shape {loss.shape}")
        if self._spent:
            raise ContractError("tape already replayed; record a fresh tape")
        self._spent = True

        adjoints: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=np.float64)}
        for out_uid, in_uids, vjp in reversed(self._ops):
            g = adjoints.pop(out_uid, None)
            if g is None:
                continue
            for uid, gin in zip(in_uids, vjp(g)):
                if gin is None:
                    continue
                acc = adjoints.get(uid)
                adjoints[uid] = gin if acc is None else acc + gin
        return [
            adjoints.get(p.uid, np.zeros_like(p.data)) for p in sources
        ]


@contextmanager
def no_grad():
    """Suspend recording on the active tape (value-only evaluation)."""
    global _ACTIVE_TAPE
    prev, _ACTIVE_TAPE = _ACTIVE_TAPE, None
    try:
        yield
    finally:
        _ACTIVE_TAPE = prev


def tape_active() -> bool:
    return _ACTIVE_TAPE is not None


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None:
        tape._ops.append((out.uid, tuple(t.uid for t in inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-vs-array broadcasting is permitted
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# primitive operations

def add(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_elementwise(ta, tb, "add")
    out = Tensor(ta.data + tb.data)
    sa, sb = ta.shape, tb.shape
    return _record(out, (ta, tb), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_elementwise(ta, tb, "sub")
    out = Tensor(ta.data - tb.data)
    sa, sb = ta.shape, tb.shape
    return _record(out, (ta, tb), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_elementwise(ta, tb, "mul")
    out = Tensor(ta.data * tb.data)
    da, db = ta.data, tb.data
    sa, sb = ta.shape, tb.shape
    return _record(
        out, (ta, tb), lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb))
    )


def neg(a) -> Tensor:
    ta = as_tensor(a)
    out = Tensor(-ta.data)
    return _record(out, (ta,), lambda g: (-g,))


def affine(inputs, weight, bias) -> Tensor:
    """Row-batched fully connected layer: ``inputs @ weight + bias``."""
    ti, tw, tb = as_tensor(inputs), as_tensor(weight), as_tensor(bias)
    if ti.ndim != 2 or tw.ndim != 2 or tb.ndim != 1:
        raise DimensionError(
            f"affine: expected (n,i), (i,o), (o,), got {ti.shape}, {tw.shape}, {tb.shape}"
        )
    if ti.shape[1] != tw.shape[0] or tw.shape[1] != tb.shape[0]:
        raise DimensionError(
            f"affine: shapes {ti.shape}, {tw.shape}, {tb.shape} do not conform"
        )
    out = Tensor(ti.data @ tw.data + tb.data)
    xd, wd = ti.data, tw.data
    return _record(
        out, (ti, tw, tb), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0))
    )


def tanh(a) -> Tensor:
    ta = as_tensor(a)
    out = Tensor(np.tanh(ta.data))
    od = out.data
    return _record(out, (ta,), lambda g: (g * (1.0 - od * od),))


def _softplus_raw(x: np.ndarray) -> np.ndarray:
    # max(x, 0) + log1p(exp(-|x|)): stable in both tails
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails: exp only of non-positive arguments
    z = np.exp(-np.abs(x))
    s = z / (1.0 + z)
    return np.where(x >= 0, 1.0 - s, s)


def softplus(a) -> Tensor:
    ta = as_tensor(a)
    out = Tensor(_softplus_raw(ta.data))
    xd = ta.data
    return _record(out, (ta,), lambda g: (g * _sigmoid(xd),))


def mish(a) -> Tensor:
    """Elementwise x * tanh(softplus(x))."""
    ta = as_tensor(a)
    xd = ta.data
    t = np.tanh(_softplus_raw(xd))
    out = Tensor(xd * t)
    return _record(
        out, (ta,), lambda g: (g * (t + xd * (1.0 - t * t) * _sigmoid(xd)),)
    )


def exp(a) -> Tensor:
    ta = as_tensor(a)
    with np.errstate(over="ignore"):
        value = np.exp(ta.data)
    if not np.all(np.isfinite(value)):
        raise NumericError("exp overflow; clamp the exponent before exponentiating")
    out = Tensor(value)
    od = out.data
    return _record(out, (ta,), lambda g: (g * od,))


def log(a) -> Tensor:
    ta = as_tensor(a)
    if np.any(ta.data <= 0.0):
        raise NumericError("log requires strictly positive input")
    out = Tensor(np.log(ta.data))
    xd = ta.data
    return _record(out, (ta,), lambda g: (g / xd,))


def square(a) -> Tensor:
    ta = as_tensor(a)
    out = Tensor(ta.data * ta.data)
    xd = ta.data
    return _record(out, (ta,), lambda g: (2.0 * xd * g,))


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient follows the selected branch (ties -> first)."""
    ta, tb = as_tensor(a), as_tensor(b)
    _check_elementwise(ta, tb, "minimum")
    take_a = ta.data <= tb.data
    out = Tensor(np.where(take_a, ta.data, tb.data))
    sa, sb = ta.shape, tb.shape
    return _record(
        out,
        (ta, tb),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
    )


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 inside the interval (inclusive)."""
    ta = as_tensor(a)
    out = Tensor(np.clip(ta.data, lo, hi))
    inside = (ta.data >= lo) & (ta.data <= hi)
    return _record(out, (ta,), lambda g: (g * inside,))


def tensor_sum(a) -> Tensor:
    ta = as_tensor(a)
    out = Tensor(ta.data.sum())
    shape = ta.shape
    return _record(out, (ta,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    ta = as_tensor(a)
    if ta.size == 0:
        raise ContractError("mean of an empty tensor")
    out = Tensor(ta.data.mean())
    shape, n = ta.shape, ta.size
    return _record(out, (ta,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def row_sum(a) -> Tensor:
    """Sum over columns of a 2-D tensor: (n, k) -> (n,)."""
    ta = as_tensor(a)
    if ta.ndim != 2:
        raise DimensionError(f"row_sum expects a 2-D tensor, got shape {ta.shape}")
    out = Tensor(ta.data.sum(axis=1))
    k = ta.shape[1]
    return _record(out, (ta,), lambda g: (np.repeat(g[:, None], k, axis=1),))


def concat_cols(parts: Sequence) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    if not tensors or any(t.ndim != 2 for t in tensors):
        raise DimensionError("concat_cols expects one or more 2-D tensors")
    n = tensors[0].shape[0]
    if any(t.shape[0] != n for t in tensors):
        raise DimensionError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(tensors)))

    return _record(out, tuple(tensors), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    ta = as_tensor(a)
    if ta.ndim != 2:
        raise DimensionError(f"slice_cols expects a 2-D tensor, got shape {ta.shape}")
    out = Tensor(ta.data[:, start:stop])
    shape = ta.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (ta,), vjp)


def repeat_rows(a, n: int) -> Tensor:
    """Tile a single-row tensor to n rows: (1, k) -> (n, k)."""
    ta = as_tensor(a)
    if ta.ndim != 2 or ta.shape[0] != 1:
        raise DimensionError(f"repeat_rows expects shape (1, k), got {ta.shape}")
    out = Tensor(np.repeat(ta.data, n, axis=0))
    return _record(out, (ta,), lambda g: (g.sum(axis=0, keepdims=True),))


def reshape(a, shape) -> Tensor:
    ta = as_tensor(a)
    out = Tensor(ta.data.reshape(shape))
    orig = ta.shape
    return _record(out, (ta,), lambda g: (g.reshape(orig),))


# ---------------------------------------------------------------------------
# random draws

def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) for cross-platform reproducibility."""
    return np.random.Generator(np.random.Philox(seed))


def sample_standard_normal(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# multilayer perceptron

_ACTIVATIONS: dict[str, Callable] = {"mish": mish, "tanh": tanh, "identity": lambda t: t}


@dataclass
class Mlp:
    """Fully connected stack; ``activation`` applies to hidden layers only."""

    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "mish"

    @property
    def layer_sizes(self) -> list[int]:
        return [w.shape[0] for w in self.weights] + [self.weights[-1].shape[1]]


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], activation: str = "mish") -> Mlp:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least input and output sizes")
    if activation not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        biases.append(Tensor(np.zeros(fan_out)))
    return Mlp(weights, biases, activation)


def apply_mlp(mlp: Mlp, x) -> Tensor:
    act = _ACTIVATIONS[mlp.activation]
    h = as_tensor(x)
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = affine(h, w, b)
        if i < last:
            h = act(h)
    return h


def mlp_parameters(mlp: Mlp) -> list[Tensor]:
    params = []
    for w, b in zip(mlp.weights, mlp.biases):
        params.extend((w, b))
    return params


def mlp_with_parameters(mlp: Mlp, new_params: Iterator[Tensor]) -> Mlp:
    """Rebuild the MLP from a parameter stream (functional update)."""
    weights, biases = [], []
    for _ in mlp.weights:
        weights.append(next(new_params))
        biases.append(next(new_params))
    return replace(mlp, weights=weights, biases=biases)
