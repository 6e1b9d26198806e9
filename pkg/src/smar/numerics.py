"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op checks its output for NaN/Inf and, when a tape is
active and any input takes part in gradients, records a backward closure on
that tape. ``backward`` replays the tape in exact reverse order.

Tensors are immutable after construction; a :class:`Tape` belongs to the
thread that opened it.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_local = threading.local()


class NumericsError(ValueError):
    """Base class for contract violations in the numerics core."""


class DimensionError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class DegenerateVectorError(NumericsError):
    pass


class DeterminismError(NumericsError):
    pass


class Tensor:
    __slots__ = ("data", "grad_enabled", "name", "__weakref__")

    def __init__(self, data, grad_enabled: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.grad_enabled = grad_enabled
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, grad_enabled: bool, op: str) -> Tensor:
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.grad_enabled = grad_enabled
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False, "detach")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, grad_enabled={self.grad_enabled})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops executed inside the block are recorded.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._prev: Tape | None = None

    def __enter__(self) -> Tape:
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = None
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev


def _active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.grad_enabled for t in inputs)
    res = Tensor._wrap(out, needs, op)
    if needs:
        tape.nodes.append(_Node(res, tuple(inputs), backward_fn, op))
    return res


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericsError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    x = as_tensor(x)
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def bw(g):
        return (g / (1.0 + np.exp(-v)),)

    return _make(out, (x,), bw, "softplus")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * (v + 0.044715 * v2 * v))
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * dinner),)

    return _make(out, (x,), bw, "gelu")


# ------------------------------------------------------------------ reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return div(sum(x, axis=axis, keepdims=keepdims), float(n))


# --------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dimensions like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def dot(a, b) -> Tensor:
    """Inner product of two vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot needs equal 1-d shapes, got {a.shape} and {b.shape}")
    return sum(mul(a, b))


# --------------------------------------------------------------------- shapes


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), bw, "getitem")


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-d table by integer ids (any id array shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-d table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"row id out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "take_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to"
    )


# ------------------------------------------------------------ normalizations


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (broadcastable bool) marks entries that
    take part; masked-out entries get probability exactly 0."""
    x = as_tensor(x)
    v = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not np.all(mask.any(axis=axis)):
            raise NumericsError("softmax row with every entry masked")
        v = np.where(mask, v, -np.inf)
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise NumericsError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm width {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw, "layer_norm")


EPS_NORM = 1e-12


def l2_normalize(x) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean length."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= EPS_NORM):
        raise DegenerateVectorError("cannot normalize a (near-)zero vector")
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), bw, "l2_normalize")


# ------------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape`` in reverse execution order.

    Returns a gradient for every tensor in ``wrt`` (default: every
    grad-enabled leaf the tape touched). Leaves that never reach the loss get
    exact zeros.
    """
    if loss.data.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    if loss.grad_enabled and id(loss) not in produced:
        raise NumericsError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.grad_enabled and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.grad_enabled:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    targets = list(wrt) if wrt is not None else list(leaves.values())
    out: dict[Tensor, np.ndarray] = {}
    for t in targets:
        g = grads.get(id(t))
        out[t] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    return out


def value_and_grad(
    f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``f`` on leaves built from ``params`` and return named gradients."""
    leaves = {name: Tensor(v, grad_enabled=True, name=name) for name, v in params.items()}
    with Tape() as tape:
        loss = f(leaves)
    g = backward(tape, loss, leaves.values())
    return loss.item(), {name: g[t] for name, t in leaves.items()}


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray], h: float = 1e-5
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The gap is measured per named parameter as
    ``||analytic - fd|| / max(||analytic||, ||fd||, 1e-8)``.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def value(p):
        with no_grad():
            return f({k: Tensor(v) for k, v in p.items()}).item()

    base = value(params)
    if value(params) != base:
        raise DeterminismError("function returned different values for identical inputs")
    _, analytic = value_and_grad(f, params)

    worst = 0.0
    for name, arr in params.items():
        fd = np.zeros_like(arr)
        flat = fd.reshape(-1)
        for i in range(arr.size):
            plus = arr.copy().reshape(-1)
            minus = arr.copy().reshape(-1)
            plus[i] += h
            minus[i] -= h
            p_plus = dict(params, **{name: plus.reshape(arr.shape)})
            p_minus = dict(params, **{name: minus.reshape(arr.shape)})
            flat[i] = (value(p_plus) - value(p_minus)) / (2 * h)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(fd), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - fd) / denom))
    return worst
