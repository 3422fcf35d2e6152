"""Dense array primitives with explicit forward/backward passes.

Arrays are plain row-major ``numpy.ndarray`` objects. Every forward op that
needs saved inputs for its backward pass records them on a :class:`GradTape`
under a caller-chosen key; the matching backward consumes the entry.

float32 is the training dtype; every op is dtype-preserving, so float64
inputs give float64 gradients for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the op contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class MissingTapeEntry(KeyError):
    """Backward called without a matching forward record."""


class GradTape:
    """Per-call store of forward caches, each consumed once by backward."""

    def __init__(self) -> None:
        self._entries: dict[str, Any] = {}

    def put(self, key: str, value: Any) -> None:
        if key in self._entries:
            raise KeyError(f"tape entry {key!r} already recorded")
        self._entries[key] = value

    def take(self, key: str) -> Any:
        try:
            return self._entries.pop(key)
        except KeyError:
            raise MissingTapeEntry(key) from None

    def peek(self, key: str) -> Any:
        try:
            return self._entries[key]
        except KeyError:
            raise MissingTapeEntry(key) from None

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return self._entries.keys()


@dataclass
class ConvParams:
    weight: np.ndarray  # [C_out, C_in, k]
    bias: np.ndarray  # [C_out]
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def out_length(self, length: int) -> int:
        return (length + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass
class LinearParams:
    weight: np.ndarray  # [D_out, D_in]
    bias: np.ndarray  # [D_out]


def check_finite(x: np.ndarray, what: str = "output") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def _record(tape: GradTape | None, key: str, value: Any) -> None:
    if tape is not None:
        tape.put(key, value)


# ---------------------------------------------------------------- conv1d


def conv1d_forward(
    x: np.ndarray, p: ConvParams, tape: GradTape | None = None, key: str = "conv"
) -> np.ndarray:
    """Cross-correlation of ``x`` [B, C_in, L] with bias; returns [B, C_out, L_out]."""
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects [B, C, L], got {x.shape}")
    c_out, c_in, k = p.weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape[1]}, weight {c_in}")
    if p.bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {p.bias.shape} != ({c_out},)")
    if p.stride < 1 or p.padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    batch, _, length = x.shape
    l_out = p.out_length(length)
    if l_out < 1:
        raise ShapeError(f"conv1d output length {l_out} < 1")

    if p.padding:
        xp = np.zeros((batch, c_in, length + 2 * p.padding), dtype=x.dtype)
        xp[:, :, p.padding : p.padding + length] = x
    else:
        xp = x
    span = p.stride * (l_out - 1) + 1
    # cols[b, c*k + j, l] = xp[b, c, l*stride + j]
    cols = np.stack([xp[:, :, j : j + span : p.stride] for j in range(k)], axis=2)
    cols = cols.reshape(batch, c_in * k, l_out)
    out = np.matmul(p.weight.reshape(c_out, c_in * k), cols)
    out += p.bias[None, :, None]
    check_finite(out, "conv1d")
    _record(tape, key, (cols, x.shape, p))
    return out


def conv1d_backward(grad_out: np.ndarray, tape: GradTape, key: str = "conv"):
    """Returns ``(grad_x, grad_weight, grad_bias)`` for the recorded forward."""
    cols, x_shape, p = tape.take(key)
    batch, c_in, length = x_shape
    c_out, _, k = p.weight.shape
    l_out = cols.shape[2]
    if grad_out.shape != (batch, c_out, l_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward")

    grad_w = np.tensordot(grad_out, cols, axes=([0, 2], [0, 2])).reshape(c_out, c_in, k)
    grad_b = grad_out.sum(axis=(0, 2))
    gcols = np.matmul(p.weight.reshape(c_out, c_in * k).T, grad_out).reshape(batch, c_in, k, l_out)

    gxp = np.zeros((batch, c_in, length + 2 * p.padding), dtype=grad_out.dtype)
    span = p.stride * (l_out - 1) + 1
    for j in range(k):
        gxp[:, :, j : j + span : p.stride] += gcols[:, :, j]
    grad_x = gxp[:, :, p.padding : p.padding + length] if p.padding else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv1d_reference(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Nested-loop cross-correlation; slow, used as an oracle only."""
    batch, c_in, length = x.shape
    c_out, _, k = p.weight.shape
    l_out = p.out_length(length)
    out = np.zeros((batch, c_out, l_out), dtype=np.float64)
    for b in range(batch):
        for o in range(c_out):
            for pos in range(l_out):
                acc = float(p.bias[o])
                for c in range(c_in):
                    for j in range(k):
                        src = pos * p.stride + j - p.padding
                        if 0 <= src < length:
                            acc += float(p.weight[o, c, j]) * float(x[b, c, src])
                out[b, o, pos] = acc
    return out


# ---------------------------------------------------------------- linear


def linear_forward(
    x: np.ndarray, p: LinearParams, tape: GradTape | None = None, key: str = "linear"
) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear expects [B, {p.weight.shape[1]}], got {x.shape}")
    if p.bias.shape != (p.weight.shape[0],):
        raise ShapeError("linear bias shape mismatch")
    out = x @ p.weight.T + p.bias
    check_finite(out, "linear")
    _record(tape, key, (x, p))
    return out


def linear_backward(grad_out: np.ndarray, tape: GradTape, key: str = "linear"):
    x, p = tape.take(key)
    if grad_out.shape != (x.shape[0], p.weight.shape[0]):
        raise ShapeError("linear grad_out shape mismatch")
    return grad_out @ p.weight, grad_out.T @ x, grad_out.sum(axis=0)


# ---------------------------------------------------------------- elementwise


def _broadcast_check(a: np.ndarray, b: np.ndarray) -> None:
    # only leading-axis broadcast: b may lack leading axes of a, or have size-1 there
    if a.shape == b.shape:
        return
    if b.ndim > a.ndim:
        raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")
    tail = a.shape[a.ndim - b.ndim :]
    for i, (da, db) in enumerate(zip(tail, b.shape)):
        if da != db and not (db == 1 and all(d == 1 for d in b.shape[: i + 1])):
            raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add_forward(a: np.ndarray, b: np.ndarray, tape=None, key: str = "add") -> np.ndarray:
    _broadcast_check(a, b)
    out = a + b
    check_finite(out, "add")
    _record(tape, key, (a.shape, b.shape))
    return out


def add_backward(grad_out: np.ndarray, tape: GradTape, key: str = "add"):
    a_shape, b_shape = tape.take(key)
    return _unbroadcast(grad_out, a_shape), _unbroadcast(grad_out, b_shape)


def scale_forward(x: np.ndarray, factor: float, tape=None, key: str = "scale") -> np.ndarray:
    out = x * x.dtype.type(factor)
    check_finite(out, "scale")
    _record(tape, key, factor)
    return out


def scale_backward(grad_out: np.ndarray, tape: GradTape, key: str = "scale"):
    factor = tape.take(key)
    return grad_out * grad_out.dtype.type(factor)


def mean_over_axis(x: np.ndarray, axis: int = 0, tape=None, key: str = "mean") -> np.ndarray:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    out = x.mean(axis=axis, dtype=x.dtype)
    _record(tape, key, (x.shape, axis % x.ndim))
    return out


def mean_over_axis_backward(grad_out: np.ndarray, tape: GradTape, key: str = "mean"):
    shape, axis = tape.take(key)
    n = shape[axis]
    g = np.expand_dims(grad_out / grad_out.dtype.type(n), axis)
    return np.ascontiguousarray(np.broadcast_to(g, shape))
