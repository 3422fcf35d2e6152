"""Spiking U-Net noise predictor over an action horizon.

Data flow for widths ``[w0, ..., w_{n-1}]``::

    x_noisy [B,H,D_a] -> encode (conv + LIF, T_S steps)            spikes
      down_i : SpikingBlock            (keeps its pre-LIF2 current as skip_i)
      pool_i : conv k=2 stride 2 -> LIF                 (i < n-1)
    mid      : SpikingBlock
      upsample_i : repeat x2 -> conv -> (+ skip_i) -> LIF   (i = n-2 .. 0)
      up_i   : SpikingBlock
    decode (shared conv per step, mean over T_S) -> eps_hat [B,H,D_a]

Every residual/skip sum happens on continuous conv-domain currents right
before an LIF layer, so every spike-carrying edge stays in {0, 1}.

Conditioning: ``cond = Lin(sinusoid(t_d)) + Lin(obs)``; each block adds its
own ``Lin(cond)`` as a per-channel current after ``conv1``.

Parameter count (``k`` kernel, ``E`` time-embedding dim, ``K`` cond dim,
``O`` obs dim, ``D`` action dim, ``n`` levels)::

    conv(ci, co, k)   = co*ci*k + co          linear(i, o) = o*i + o
    block(ci, co)     = conv(ci,co,k) + conv(co,co,k) + linear(K,co) + 2*co
    total = linear(E,K) + linear(O,K)
          + conv(D,w0,k) + w0                                   encoder
          + sum_i block(w_{i-1} or w0, w_i)                     down path
          + sum_{i<n-1} [conv(w_i, w_i, 2) + w_i]               pooling
          + block(w_{n-1}, w_{n-1})                             bottleneck
          + sum_{i<n-1} [conv(w_{i+1}, w_i, k) + w_i + block(w_i, w_i)]
          + conv(w0, D, k)                                      decoder
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import fold_time, unfold_time
from .lif import LifParams, assert_binary, lif_backward, lif_forward, m_of_theta
from .tensor import (
    ConvParams,
    GradTape,
    LinearParams,
    ShapeError,
    conv1d_backward,
    conv1d_forward,
    linear_backward,
    linear_forward,
)


@dataclass
class UNetConfig:
    widths: list[int] = field(default_factory=lambda: [64, 128, 256])
    horizon: int = 16
    action_dim: int = 2
    obs_dim: int = 12
    steps: int = 4  # T_S
    kernel: int = 3
    tau: float = 0.5
    m_init: float = 0.7
    time_emb_dim: int = 64
    cond_dim: int = 64
    init_gain: float = 2.0
    lcmt: bool = True
    theta_fixed: float = 0.5

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("widths must be a non-empty list of positive ints")
        if self.horizon % (2 ** (len(self.widths) - 1)):
            raise ValueError("horizon must be divisible by 2**(levels-1)")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.steps < 1:
            raise ValueError("steps (T_S) must be >= 1")
        if self.time_emb_dim < 2 or self.time_emb_dim % 2:
            raise ValueError("time_emb_dim must be even and >= 2")

    @property
    def levels(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        return asdict(self)


def block_names(cfg: UNetConfig) -> list[str]:
    n = cfg.levels
    return [f"down{i}" for i in range(n)] + ["mid"] + [f"up{i}" for i in range(n - 2, -1, -1)]


def lif_names(cfg: UNetConfig) -> list[str]:
    n = cfg.levels
    names = ["enc.lif"]
    for i in range(n):
        names += [f"down{i}.lif1", f"down{i}.lif2"]
        if i < n - 1:
            names.append(f"pool{i}.lif")
    names += ["mid.lif1", "mid.lif2"]
    for i in range(n - 2, -1, -1):
        names += [f"upsample{i}.lif", f"up{i}.lif1", f"up{i}.lif2"]
    return names


def param_count(cfg: UNetConfig) -> int:
    k, n, w, K = cfg.kernel, cfg.levels, cfg.widths, cfg.cond_dim

    def conv(ci, co, kk):
        return co * ci * kk + co

    def lin(i, o):
        return o * i + o

    def block(ci, co):
        return conv(ci, co, k) + conv(co, co, k) + lin(K, co) + 2 * co

    total = lin(cfg.time_emb_dim, K) + lin(cfg.obs_dim, K)
    total += conv(cfg.action_dim, w[0], k) + w[0]
    for i in range(n):
        total += block(w[i - 1] if i else w[0], w[i])
    for i in range(n - 1):
        total += conv(w[i], w[i], 2) + w[i]
    total += block(w[-1], w[-1])
    for i in range(n - 1):
        total += conv(w[i + 1], w[i], k) + w[i] + block(w[i], w[i])
    total += conv(w[0], cfg.action_dim, k)
    return total


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """[B] integer steps -> [B, dim] (sin half, cos half)."""
    half = dim // 2
    scale = math.log(10000.0) / max(half - 1, 1)
    freqs = np.exp(-scale * np.arange(half, dtype=np.float64))
    arg = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1).astype(dtype)


def init_params(cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform(+-gain/sqrt(fan_in)) weights and biases; zero final decoder conv."""
    params: dict[str, np.ndarray] = {}
    m0 = cfg.m_init if cfg.lcmt else m_of_theta(cfg.theta_fixed)

    def uni(shape, fan_in):
        bound = cfg.init_gain / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def conv(name, ci, co, k):
        params[f"{name}.w"] = uni((co, ci, k), ci * k)
        params[f"{name}.b"] = uni((co,), ci * k)

    def lin(name, i, o):
        params[f"{name}.w"] = uni((o, i), i)
        params[f"{name}.b"] = uni((o,), i)

    def lif(name, c):
        params[f"{name}.m"] = np.full(c, m0, dtype=dtype)

    def block(name, ci, co):
        conv(f"{name}.conv1", ci, co, cfg.kernel)
        lin(f"{name}.cond", cfg.cond_dim, co)
        lif(f"{name}.lif1", co)
        conv(f"{name}.conv2", co, co, cfg.kernel)
        lif(f"{name}.lif2", co)

    w, n = cfg.widths, cfg.levels
    lin("time", cfg.time_emb_dim, cfg.cond_dim)
    lin("obs", cfg.obs_dim, cfg.cond_dim)
    conv("enc.conv", cfg.action_dim, w[0], cfg.kernel)
    lif("enc.lif", w[0])
    for i in range(n):
        block(f"down{i}", w[i - 1] if i else w[0], w[i])
        if i < n - 1:
            conv(f"pool{i}.conv", w[i], w[i], 2)
            lif(f"pool{i}.lif", w[i])
    block("mid", w[-1], w[-1])
    for i in range(n - 2, -1, -1):
        conv(f"upsample{i}.conv", w[i + 1], w[i], cfg.kernel)
        lif(f"upsample{i}.lif", w[i])
        block(f"up{i}", w[i], w[i])
    params["dec.conv.w"] = np.zeros((cfg.action_dim, w[0], cfg.kernel), dtype=dtype)
    params["dec.conv.b"] = np.zeros(cfg.action_dim, dtype=dtype)
    return params


@dataclass
class Trace:
    """Optional forward instrumentation: what entered each conv, LIF states."""

    conv_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    lif_states: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    currents: dict[str, np.ndarray] = field(default_factory=dict)


class SpikingUNet:
    """Parameters plus explicit forward/backward for the spiking denoiser."""

    def __init__(self, cfg: UNetConfig, params: dict[str, np.ndarray], check_spikes: bool = True):
        self.cfg = cfg
        self.params = params
        self.check_spikes = check_spikes

    @classmethod
    def create(cls, cfg: UNetConfig, seed: int = 0, dtype=np.float32, **kw) -> "SpikingUNet":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), dtype), **kw)

    @property
    def dtype(self):
        return self.params["dec.conv.w"].dtype

    # ------------------------------------------------------------ views

    def conv(self, name: str, stride: int = 1, padding: int | None = None) -> ConvParams:
        w = self.params[f"{name}.w"]
        if padding is None:
            padding = (w.shape[2] - 1) // 2
        return ConvParams(w, self.params[f"{name}.b"], stride, padding)

    def linear(self, name: str) -> LinearParams:
        return LinearParams(self.params[f"{name}.w"], self.params[f"{name}.b"])

    def lif(self, name: str) -> LifParams:
        return LifParams(self.params[f"{name}.m"], self.cfg.tau, self.cfg.lcmt)

    def _pool(self, i: int) -> ConvParams:
        return self.conv(f"pool{i}.conv", stride=2, padding=0)

    # ------------------------------------------------------------ forward

    def _spikes(self, s: np.ndarray, what: str, smooth: bool) -> None:
        if self.check_spikes and not smooth:
            assert_binary(s, what)

    def _conv_t(self, s, p: ConvParams, tape, key, trace):
        """Shared-weight conv over every time slice of [T, B, C, L]."""
        if trace is not None:
            trace.conv_inputs[key] = s
        y = conv1d_forward(fold_time(s), p, tape, key)
        return unfold_time(y, s.shape[0])

    def _lif(self, current, name, tape, smooth, trace):
        s = lif_forward(current, self.lif(name), tape, name, smooth=smooth)
        if trace is not None:
            rec = tape.peek(name) if tape is not None else None
            if rec is not None:
                trace.lif_states[name] = (rec.u, rec.s)
            trace.currents[name] = current
        self._spikes(s, name, smooth)
        return s

    def _block(self, name, s_in, cond, tape, smooth, trace):
        c1 = self._conv_t(s_in, self.conv(f"{name}.conv1"), tape, f"{name}.conv1", trace)
        if trace is not None:
            trace.conv_inputs[f"{name}.cond"] = cond
        cb = linear_forward(cond, self.linear(f"{name}.cond"), tape, f"{name}.cond")
        c1 = c1 + cb[None, :, :, None]
        s1 = self._lif(c1, f"{name}.lif1", tape, smooth, trace)
        c2 = self._conv_t(s1, self.conv(f"{name}.conv2"), tape, f"{name}.conv2", trace) + c1
        s2 = self._lif(c2, f"{name}.lif2", tape, smooth, trace)
        return s2, c2

    def embed(self, t_d, obs, tape=None, trace=None) -> np.ndarray:
        batch = obs.shape[0]
        t = np.broadcast_to(np.asarray(t_d), (batch,))
        temb = sinusoidal_embedding(t, self.cfg.time_emb_dim, self.dtype)
        obs = obs.astype(self.dtype, copy=False)
        if trace is not None:
            trace.conv_inputs["time"], trace.conv_inputs["obs"] = temb, obs
        return (linear_forward(temb, self.linear("time"), tape, "time")
                + linear_forward(obs, self.linear("obs"), tape, "obs"))

    def forward(self, x_noisy: np.ndarray, t_d, obs: np.ndarray, tape: GradTape | None = None,
                smooth: bool = False, trace: Trace | None = None) -> np.ndarray:
        cfg = self.cfg
        if x_noisy.ndim != 3 or x_noisy.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise ShapeError(f"expected [B, {cfg.horizon}, {cfg.action_dim}], got {x_noisy.shape}")
        if obs.shape != (x_noisy.shape[0], cfg.obs_dim):
            raise ShapeError(f"expected obs [B, {cfg.obs_dim}], got {obs.shape}")
        n, steps = cfg.levels, cfg.steps
        cond = self.embed(t_d, obs, tape, trace)

        x = np.ascontiguousarray(x_noisy.astype(self.dtype, copy=False).transpose(0, 2, 1))
        if trace is not None:
            trace.conv_inputs["enc.conv"] = x
        current = conv1d_forward(x, self.conv("enc.conv"), tape, "enc.conv")
        s = self._lif(np.ascontiguousarray(np.broadcast_to(current, (steps,) + current.shape)),
                      "enc.lif", tape, smooth, trace)

        skips = []
        for i in range(n):
            s, c2 = self._block(f"down{i}", s, cond, tape, smooth, trace)
            skips.append(c2)
            if i < n - 1:
                c = self._conv_t(s, self._pool(i), tape, f"pool{i}.conv", trace)
                s = self._lif(c, f"pool{i}.lif", tape, smooth, trace)
        s, _ = self._block("mid", s, cond, tape, smooth, trace)
        for i in range(n - 2, -1, -1):
            s = np.repeat(s, 2, axis=-1)
            c = self._conv_t(s, self.conv(f"upsample{i}.conv"), tape, f"upsample{i}.conv", trace)
            s = self._lif(c + skips[i], f"upsample{i}.lif", tape, smooth, trace)
            s, _ = self._block(f"up{i}", s, cond, tape, smooth, trace)

        y = self._conv_t(s, self.conv("dec.conv"), tape, "dec.conv", trace)
        out = y.mean(axis=0, dtype=y.dtype)
        return np.ascontiguousarray(out.transpose(0, 2, 1))

    __call__ = forward

    # ------------------------------------------------------------ backward

    def backward(self, grad_out: np.ndarray, tape: GradTape) -> dict[str, np.ndarray]:
        """Gradients for every parameter of a recorded forward pass."""
        cfg = self.cfg
        n, steps = cfg.levels, cfg.steps
        grads: dict[str, np.ndarray] = {}
        g_cond = None

        def conv_t_back(g, key):
            gx, gw, gb = conv1d_backward(fold_time(np.ascontiguousarray(g)), tape, key)
            grads[f"{key}.w"], grads[f"{key}.b"] = gw, gb
            return unfold_time(gx, steps)

        def lif_back(g, name):
            g_cur, g_m = lif_backward(g, tape, name, self.lif(name))
            grads[f"{name}.m"] = g_m
            return g_cur

        def block_back(g_s2, name, g_c2_extra=None):
            nonlocal g_cond
            g_c2 = lif_back(g_s2, f"{name}.lif2")
            if g_c2_extra is not None:
                g_c2 = g_c2 + g_c2_extra
            g_c1 = g_c2 + lif_back(conv_t_back(g_c2, f"{name}.conv2"), f"{name}.lif1")
            g_cb = g_c1.sum(axis=(0, 3))
            gc, gw, gb = linear_backward(g_cb, tape, f"{name}.cond")
            grads[f"{name}.cond.w"], grads[f"{name}.cond.b"] = gw, gb
            g_cond = gc if g_cond is None else g_cond + gc
            return conv_t_back(g_c1, f"{name}.conv1")

        g_y = grad_out.astype(self.dtype, copy=False).transpose(0, 2, 1) / self.dtype.type(steps)
        g_s = conv_t_back(np.broadcast_to(g_y, (steps,) + g_y.shape), "dec.conv")

        g_skips: dict[int, np.ndarray] = {}
        for i in range(n - 1):
            g_s = block_back(g_s, f"up{i}")
            g_c = lif_back(g_s, f"upsample{i}.lif")
            g_skips[i] = g_c
            g_rep = conv_t_back(g_c, f"upsample{i}.conv")
            g_s = g_rep.reshape(g_rep.shape[:-1] + (g_rep.shape[-1] // 2, 2)).sum(axis=-1)
        g_s = block_back(g_s, "mid")
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                g_c = lif_back(g_s, f"pool{i}.lif")
                g_s = conv_t_back(g_c, f"pool{i}.conv")
            g_s = block_back(g_s, f"down{i}", g_skips.get(i))

        g_cur = lif_back(g_s, "enc.lif").sum(axis=0)
        _, gw, gb = conv1d_backward(g_cur, tape, "enc.conv")
        grads["enc.conv.w"], grads["enc.conv.b"] = gw, gb

        for name in ("time", "obs"):
            _, gw, gb = linear_backward(g_cond, tape, name)
            grads[f"{name}.w"], grads[f"{name}.b"] = gw, gb
        return grads
