"""Static <-> spike-train conversion at the network boundary.

Encoding uses direct coding: the convolved static input is injected as the
same current at every one of the ``T_S`` steps of an LIF layer. Decoding
applies one shared convolution to every time slice and averages over time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lif import LifParams, assert_binary, lif_backward, lif_forward
from .tensor import (
    ConvParams,
    GradTape,
    ShapeError,
    conv1d_backward,
    conv1d_forward,
)


@dataclass
class EncoderBlock:
    conv: ConvParams
    lif: LifParams
    steps: int  # T_S


@dataclass
class DecoderBlock:
    conv: ConvParams


def fold_time(x: np.ndarray) -> np.ndarray:
    """[T, B, ...] -> [T*B, ...]"""
    return x.reshape((x.shape[0] * x.shape[1],) + x.shape[2:])


def unfold_time(x: np.ndarray, steps: int) -> np.ndarray:
    return x.reshape((steps, x.shape[0] // steps) + x.shape[1:])


def encode(x_static: np.ndarray, enc: EncoderBlock, tape: GradTape | None = None,
           key: str = "enc", smooth: bool = False) -> np.ndarray:
    """[B, C, L] -> spikes [T_S, B, C', L]."""
    if enc.steps < 1:
        raise ShapeError("T_S must be >= 1")
    current = conv1d_forward(x_static, enc.conv, tape, f"{key}.conv")
    currents = np.broadcast_to(current, (enc.steps,) + current.shape)
    return lif_forward(np.ascontiguousarray(currents), enc.lif, tape, f"{key}.lif", smooth=smooth)


def encode_backward(grad_out: np.ndarray, enc: EncoderBlock, tape: GradTape, key: str = "enc"):
    """Returns ``(grad_x, grad_weight, grad_bias, grad_m)``."""
    g_cur, g_m = lif_backward(grad_out, tape, f"{key}.lif", enc.lif)
    gx, gw, gb = conv1d_backward(g_cur.sum(axis=0), tape, f"{key}.conv")
    return gx, gw, gb, g_m


def decode(s: np.ndarray, dec: DecoderBlock, tape: GradTape | None = None,
           key: str = "dec", check: bool = True) -> np.ndarray:
    """Spikes [T_S, B, C, L] -> static [B, C'', L] (time-mean of a shared conv)."""
    if s.ndim != 4:
        raise ShapeError(f"decode expects [T, B, C, L], got {s.shape}")
    if check:
        assert_binary(s, "decoder input")
    steps = s.shape[0]
    y = conv1d_forward(fold_time(s), dec.conv, tape, f"{key}.conv")
    if tape is not None:
        tape.put(f"{key}.steps", steps)
    return unfold_time(y, steps).mean(axis=0, dtype=y.dtype)


def decode_backward(grad_out: np.ndarray, tape: GradTape, key: str = "dec"):
    """Returns ``(grad_spikes, grad_weight, grad_bias)``."""
    steps = tape.take(f"{key}.steps")
    g = np.broadcast_to(grad_out / grad_out.dtype.type(steps), (steps,) + grad_out.shape)
    gx, gw, gb = conv1d_backward(fold_time(np.ascontiguousarray(g)), tape, f"{key}.conv")
    return unfold_time(gx, steps), gw, gb
