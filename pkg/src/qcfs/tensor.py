"""Dense float64 tensors with a minimal reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array. Tensors created through
:meth:`Tape.leaf` are *tracked*: every primitive applied to a tracked tensor
appends one record to the tape, and :meth:`Tape.backward` replays the records
in reverse order. Untracked tensors behave like plain arrays and record
nothing, so the same forward code serves both training and inference.

The raw numpy kernels (``conv2d_forward`` and friends) are exported too; the
simulator and the energy accounting call them directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, NonFiniteError, UsageError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "tape", "name")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.tracked})"


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of primitive operations for one forward/backward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def leaf(self, data, name: str | None = None) -> Tensor:
        return Tensor(np.array(data, dtype=DTYPE), tape=self, name=name)

    def record(self, op, inputs, output, backward):
        if self._consumed:
            raise UsageError("tape already replayed; start a new Tape for the next pass")
        self.records.append(_Record(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self:
            raise UsageError("backward() called on a tensor that is not recorded on this tape")
        if loss.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise UsageError("tape already replayed")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or inp.tape is None:
                    continue
                gi = np.asarray(gi, dtype=DTYPE).reshape(inp.shape)
                _check_finite(gi, f"{rec.op} (backward)")
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor that ``loss`` depends on."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise UsageError("backward() requires a tracked scalar produced by recorded ops")
    loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def apply(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a primitive's result and record it when any input is tracked.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    _check_finite(data, op)
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise UsageError(f"{op}: inputs are recorded on different tapes")
    tape = next(iter(tapes.values()), None)
    out = Tensor(data, tape=tape)
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# numpy kernels


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if stride < 1 or k < 1 or pad < 0:
        raise ConfigurationError(f"invalid conv settings k={k} stride={stride} pad={pad}")
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv output size ({size}+2*{pad}-{k})/{stride}+1 is not a positive integer"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N, C, Ho, Wo, k, k) view
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, c, h, wd = x.shape
    f, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {w.shape}")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, k, stride)[:, :, :ho, :wo]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, grad, stride=1, pad=0):
    """Return (dx, dw) for ``conv2d_forward(x, w, stride, pad)``."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho, wo = grad.shape[2], grad.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, k, stride)[:, :, :ho, :wo]
    dw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, k, k)
    dcols = np.tensordot(grad, w, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
    dxp = np.zeros(xp.shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw


def _check_pool(x: np.ndarray, k: int, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected (N, C, H, W) input, got {x.shape}")
    if k < 1 or x.shape[2] % k or x.shape[3] % k:
        raise ConfigurationError(f"{op}: extent {x.shape[2:]} not divisible by window {k}")


def avgpool2d_forward(x: np.ndarray, k: int) -> np.ndarray:
    _check_pool(x, k, "avgpool2d")
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def avgpool2d_backward(grad: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(grad, k, axis=2), k, axis=3) / (k * k)


def maxpool2d_forward(x: np.ndarray, k: int) -> np.ndarray:
    _check_pool(x, k, "maxpool2d")
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))


# ---------------------------------------------------------------------------
# differentiable primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return apply("matmul", A @ B, (a, b), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return apply("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add_bias(x, b) -> Tensor:
    """Add a per-feature (axis 1) bias, broadcast over batch and spatial axes."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.data.ndim))

    def back(g):
        return g, g.sum(axis=reduce_axes)

    return apply("add_bias", x.data + b.data.reshape(view), (x, b), back)


def dense(x, w, b=None) -> Tensor:
    """``x @ w.T (+ b)`` for weights stored as (out_features, in_features)."""
    y = matmul(x, transpose(w))
    return add_bias(y, b) if b is not None else y


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expected (N,C,H,W) input and (F,C,k,k) kernels, "
                             f"got {x.shape} and {w.shape}")
    X, W = x.data, w.data
    out = conv2d_forward(X, W, stride, pad)

    def back(g):
        return conv2d_backward(X, W, g, stride, pad)

    y = apply("conv2d", out, (x, w), back)
    return reshape(y, y.shape[1:]) if single else y


def avgpool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    y = apply("avgpool2d", avgpool2d_forward(x.data, k), (x,),
              lambda g: (avgpool2d_backward(g, k),))
    return reshape(y, y.shape[1:]) if single else y


def maxpool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    X = x.data
    out = maxpool2d_forward(X, k)

    def back(g):
        n, c, h, w = X.shape
        win = X.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // k, w // k, k * k)
        first = win.argmax(axis=-1)
        mask = np.zeros_like(win)
        np.put_along_axis(mask, first[..., None], 1.0, axis=-1)
        mask = mask.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return ((mask * g[:, :, :, None, :, None]).reshape(X.shape),)

    return apply("maxpool2d", out, (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return apply("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return apply("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tsum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return apply("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape),))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return apply("scale", x.data * c, (x,), lambda g: (g * c,))
