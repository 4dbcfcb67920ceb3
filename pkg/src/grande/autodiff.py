"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

All heavy math in this package flows through the primitives below.  A
``Tape`` records every primitive application in execution order (which is a
valid topological order); ``Tape.backward`` replays the records in exact
reverse order, accumulating gradients into ``Tensor.grad``.  When no tape is
active the primitives compute forward values only, which is how inference
runs without bookkeeping overhead.

Reductions use numpy's fixed left-to-right orderings throughout, so repeated
runs on the same platform are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "subtract",
    "negative",
    "multiply",
    "divide",
    "matmul",
    "exp",
    "log",
    "sin",
    "cos",
    "relu",
    "sigmoid",
    "clip",
    "sum_",
    "mean",
    "concat",
    "slice_",
    "reshape",
    "gather",
    "segment_sum",
    "softmax",
    "layer_norm",
    "segment_max_data",
    "grad_check",
    "no_tape_active",
]


class Tensor:
    """A dense float64 array plus an optional same-shape gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

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

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # Small amount of operator sugar; the named functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one differentiable program.

    Operands are always recorded before the results that consume them, so a
    single reverse sweep visits every node after all of its uses.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(x) into ``x.grad`` for every recorded tensor.

        ``output`` must be a scalar (shape () or (1,)).
        """
        if output.size != 1:
            raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
        if not np.isfinite(output.data).all():
            raise FloatingPointError("backward: non-finite output value")
        if output.grad is None:
            output.grad = np.ones_like(output.data)
        for out, inputs, backward_fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            input_grads = backward_fn(g)
            for tensor, grad in zip(inputs, input_grads):
                if grad is None:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    tensor.grad = tensor.grad + grad


def no_tape_active() -> bool:
    return not _TAPE_STACK


def _tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    tape = _tape()
    if tape is not None:
        a_shape, b_shape = a.data.shape, b.data.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        tape.record(out, (a, b), backward)
    return out


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    tape = _tape()
    if tape is not None:
        a_shape, b_shape = a.data.shape, b.data.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        tape.record(out, (a, b), backward)
    return out


def negative(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    tape = _tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (-g,))
    return out


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    tape = _tape()
    if tape is not None:
        a_data, b_data = a.data, b.data

        def backward(g):
            return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

        tape.record(out, (a, b), backward)
    return out


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)
    tape = _tape()
    if tape is not None:
        a_data, b_data = a.data, b.data

        def backward(g):
            ga = _unbroadcast(g / b_data, a_data.shape)
            gb = _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape)
            return ga, gb

        tape.record(out, (a, b), backward)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    tape = _tape()
    if tape is not None:
        out_data = out.data
        tape.record(out, (a,), lambda g: (g * out_data,))
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))
    tape = _tape()
    if tape is not None:
        a_data = a.data
        tape.record(out, (a,), lambda g: (g / a_data,))
    return out


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sin(a.data))
    tape = _tape()
    if tape is not None:
        a_data = a.data
        tape.record(out, (a,), lambda g: (g * np.cos(a_data),))
    return out


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.cos(a.data))
    tape = _tape()
    if tape is not None:
        a_data = a.data
        tape.record(out, (a,), lambda g: (-g * np.sin(a_data),))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    tape = _tape()
    if tape is not None:
        mask = a.data > 0.0
        tape.record(out, (a,), lambda g: (g * mask,))
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Piecewise form avoids overflow in exp for large |x|.
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None:
        y = out.data
        tape.record(out, (a,), lambda g: (g * y * (1.0 - y),))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where not clamped."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    tape = _tape()
    if tape is not None:
        mask = (a.data >= lo) & (a.data <= hi)
        tape.record(out, (a,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# linear algebra, reshaping, reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    tape = _tape()
    if tape is not None:
        a_data, b_data = a.data, b.data

        def backward(g):
            return g @ b_data.T, a_data.T @ g

        tape.record(out, (a, b), backward)
    return out


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    tape = _tape()
    if tape is not None:
        a_shape = a.data.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a_shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a_shape).copy(),)

        tape.record(out, (a,), backward)
    return out


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return divide(sum_(a, axis=axis), float(n))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _tape()
    if tape is not None:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        tape.record(out, tuple(tensors), backward)
    return out


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing; backward scatters into a zero array."""
    a = _as_tensor(a)
    out = Tensor(a.data[index])
    tape = _tape()
    if tape is not None:
        a_shape = a.data.shape

        def backward(g):
            full = np.zeros(a_shape)
            full[index] = g
            return (full,)

        tape.record(out, (a,), backward)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    tape = _tape()
    if tape is not None:
        a_shape = a.data.shape
        tape.record(out, (a,), lambda g: (g.reshape(a_shape),))
    return out


def gather(a, index: np.ndarray) -> Tensor:
    """Select rows (axis 0) by integer array; backward is scatter-add."""
    a = _as_tensor(a)
    index = np.asarray(index)
    out = Tensor(a.data[index])
    tape = _tape()
    if tape is not None:
        a_shape = a.data.shape

        def backward(g):
            full = np.zeros(a_shape)
            np.add.at(full, index, g)
            return (full,)

        tape.record(out, (a,), backward)
    return out


def segment_sum(a, segments: np.ndarray, num_segments: int, assume_sorted: bool = False) -> Tensor:
    """Sum rows of ``a`` grouped by segment id; empty segments yield zeros.

    ``assume_sorted=True`` uses a reduceat fast path and requires ``segments``
    to be ascending.
    """
    a = _as_tensor(a)
    segments = np.asarray(segments)
    if segments.shape[0] != a.shape[0]:
        raise ValueError(
            f"segment_sum: {a.shape[0]} rows but {segments.shape[0]} segment ids"
        )
    out_shape = (num_segments,) + a.data.shape[1:]
    out_data = np.zeros(out_shape)
    if segments.size:
        if assume_sorted:
            starts = np.flatnonzero(np.r_[True, segments[1:] != segments[:-1]])
            out_data[segments[starts]] = np.add.reduceat(a.data, starts, axis=0)
        else:
            np.add.at(out_data, segments, a.data)
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (g[segments],))
    return out


def segment_max_data(values: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    """Per-segment max of a plain array (not differentiated); empty -> -inf.

    ``segments`` must be ascending.
    """
    out = np.full(num_segments, -np.inf)
    if segments.size:
        starts = np.flatnonzero(np.r_[True, segments[1:] != segments[:-1]])
        out[segments[starts]] = np.maximum.reduceat(values, starts)
    return out


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))
    tape = _tape()
    if tape is not None:
        y = out.data

        def backward(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return ((g - dot) * y,)

        tape.record(out, (a,), backward)
    return out


LAYER_NORM_EPS = 1e-5


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to mean 0, variance 1 (no affine part)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat)
    tape = _tape()
    if tape is not None:
        n = a.data.shape[-1]

        def backward(g):
            g_mean = g.mean(axis=-1, keepdims=True)
            gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
            return (inv * (g - g_mean - xhat * gx_mean),)

        del n
        tape.record(out, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Returns the max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    point.zero_grad()
    with Tape() as tape:
        out = f(point)
        if out.size != 1:
            raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise FloatingPointError("grad_check: non-finite function value")
        tape.backward(out)
    g_ad = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    point.zero_grad()

    g_fd = np.zeros_like(point.data)
    flat = point.data.ravel()
    fd_flat = g_fd.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(point).data)
        flat[i] = orig - step
        lo = float(f(point).data)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * step)
    if not (np.isfinite(g_ad).all() and np.isfinite(g_fd).all()):
        raise FloatingPointError("grad_check: non-finite gradient values")
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    if g_ad.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / denom))
