"""Discrete-time LIF neurons with learnable channel-wise membrane thresholds.

Membrane update per step ``t`` (hard reset, ``u[0] = 0``)::

    u[t] = tau * u[t-1] * (1 - s[t-1]) + I[t]
    s[t] = H(u[t] - theta[c])            H(0) = 1

Each channel ``c`` owns one raw parameter ``m[c]``; the threshold is the
bounded map ``theta = m / sqrt(1 + m^2)`` which keeps it inside (-1, 1).
Gradients through ``H`` use the boxcar surrogate that is 1 on ``[0, 0.5]``.
The reset factor ``(1 - s[t-1])`` is treated as a constant in backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradTape, NonFiniteError, ShapeError, check_finite

SURROGATE_LOW = 0.0
SURROGATE_HIGH = 0.5


class NonBinarySpikes(ValueError):
    """A spike-carrying edge held a value outside {0, 1}."""


def _require_finite(m: np.ndarray) -> None:
    if not np.isfinite(m).all():
        raise NonFiniteError("non-finite threshold parameter")


def theta_of_m(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    _require_finite(m)
    return m / np.hypot(1, m)


def dtheta_dm(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    _require_finite(m)
    h = np.hypot(1, m)
    with np.errstate(over="ignore"):
        return 1 / (h * h * h)


def m_of_theta(theta: float) -> float:
    """Inverse of :func:`theta_of_m` for ``|theta| < 1``."""
    if not -1.0 < theta < 1.0:
        raise ValueError("theta must lie in (-1, 1)")
    return theta / np.sqrt(1.0 - theta * theta)


def surrogate_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return ((x >= SURROGATE_LOW) & (x <= SURROGATE_HIGH)).astype(x.dtype)


def surrogate_ramp(x: np.ndarray) -> np.ndarray:
    """Continuous stand-in for H whose derivative is :func:`surrogate_grad`.

    Used only by gradient oracles (the ``smooth`` forward mode).
    """
    return np.clip(x, SURROGATE_LOW, SURROGATE_HIGH)


def assert_binary(s: np.ndarray, what: str = "spike train") -> None:
    if not np.all((s == 0) | (s == 1)):
        raise NonBinarySpikes(f"{what} contains values outside {{0, 1}}")


@dataclass
class LifParams:
    m: np.ndarray  # [C]
    tau: float = 0.5
    learnable: bool = True

    @property
    def theta(self) -> np.ndarray:
        return theta_of_m(self.m)

    @property
    def channels(self) -> int:
        return self.m.shape[0]

    @classmethod
    def init(cls, channels: int, m_init: float = 0.7, tau: float = 0.5,
             dtype=np.float32, learnable: bool = True) -> "LifParams":
        return cls(np.full(channels, m_init, dtype=dtype), tau, learnable)


@dataclass
class LifRecord:
    """What backward needs: pre-reset potentials and emitted spikes."""

    u: np.ndarray  # [T, ...]
    s: np.ndarray  # [T, ...] hard spikes (drive the reset)
    theta: np.ndarray
    channel_axis: int
    tau: float
    extra: dict = field(default_factory=dict)


def _theta_view(theta: np.ndarray, ndim: int, channel_axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[channel_axis] = theta.shape[0]
    return theta.reshape(shape)


def lif_forward(
    currents: np.ndarray,
    params: LifParams,
    tape: GradTape | None = None,
    key: str = "lif",
    smooth: bool = False,
) -> np.ndarray:
    """Run the neuron for ``T_S = currents.shape[0]`` steps.

    ``currents`` is ``[T, B, C, L]`` or ``[T, B, C]``; channel axis is 2.
    With ``smooth=True`` the emitted values are :func:`surrogate_ramp` of the
    membrane margin instead of hard spikes (reset still uses hard spikes).
    """
    if currents.ndim not in (3, 4):
        raise ShapeError(f"LIF expects [T, B, C(, L)], got {currents.shape}")
    channel_axis = 2
    if currents.shape[channel_axis] != params.channels:
        raise ShapeError(
            f"LIF channel mismatch: currents {currents.shape[channel_axis]}, params {params.channels}"
        )
    check_finite(currents, "LIF input current")
    dtype = currents.dtype
    theta = theta_of_m(params.m).astype(dtype)
    th = _theta_view(theta, currents.ndim - 1, channel_axis - 1)
    tau = dtype.type(params.tau)

    steps = currents.shape[0]
    u = np.empty_like(currents)
    s = np.empty_like(currents)
    prev_u = np.zeros_like(currents[0])
    prev_s = np.zeros_like(currents[0])
    for t in range(steps):
        u_t = tau * prev_u * (1 - prev_s) + currents[t]
        s_t = (u_t >= th).astype(dtype)
        u[t] = u_t
        s[t] = s_t
        prev_u, prev_s = u_t, s_t

    if tape is not None:
        tape.put(key, LifRecord(u, s, theta, channel_axis, params.tau))
    if smooth:
        return surrogate_ramp(u - th[None])
    return s


def lif_backward(grad_out: np.ndarray, tape: GradTape, key: str = "lif", params: LifParams | None = None):
    """BPTT through the recurrence.

    Returns ``(grad_currents, grad_m)``; ``grad_m`` sums the per-neuron
    threshold gradients over every neuron of the channel. ``params`` supplies
    ``m`` for the chain factor d(theta)/dm; without it ``grad_m`` is None and
    the threshold gradient is returned instead.
    """
    rec: LifRecord = tape.take(key)
    if grad_out.shape != rec.u.shape:
        raise ShapeError(f"LIF grad shape {grad_out.shape} != {rec.u.shape}")
    dtype = grad_out.dtype
    th = _theta_view(rec.theta.astype(dtype), rec.u.ndim - 1, rec.channel_axis - 1)
    tau = dtype.type(rec.tau)

    steps = rec.u.shape[0]
    grad_cur = np.empty_like(grad_out)
    grad_theta_map = np.zeros_like(grad_out[0])
    carry = np.zeros_like(grad_out[0])
    for t in range(steps - 1, -1, -1):
        sg = surrogate_grad(rec.u[t] - th).astype(dtype)
        direct = grad_out[t] * sg
        g_u = direct + carry
        grad_cur[t] = g_u
        grad_theta_map -= direct
        if t > 0:
            # u[t] = tau * u[t-1] * (1 - s[t-1]) + I[t]
            carry = g_u * tau * (1 - rec.s[t - 1])

    reduce_axes = tuple(a for a in range(grad_theta_map.ndim) if a != rec.channel_axis - 1)
    grad_theta = grad_theta_map.sum(axis=reduce_axes)
    if params is None:
        return grad_cur, grad_theta
    return grad_cur, grad_theta * dtheta_dm(params.m).astype(dtype)
