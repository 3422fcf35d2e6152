"""Dynamic-energy estimate of the spiking U-Net versus its dense twin.

    E_SNN = E_AC  * SOPs         E_ANN = E_MAC * AOPs
    SOPs  = T_S * psi * AOPs     (psi: firing rate of the layer's input train)

Layers whose input is continuous (timestep/observation embeddings, the
encoder conv, per-block conditioning) are billed at MAC cost in both
networks and evaluated once per forward pass, as the network does.

Energy units follow the source constants (0.9 and 4.6 "uJ" per op; the
usual 45 nm figures are pJ). Only the ratio is meaningful.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .tensor import GradTape, conv1d_forward
from .unet import SpikingUNet, Trace, UNetConfig


@dataclass(frozen=True)
class EnergyConstants:
    e_ac: float = 0.9
    e_mac: float = 4.6

    def __post_init__(self):
        if self.e_ac <= 0 or self.e_mac <= 0:
            raise ValueError("energy constants must be positive")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "linear"
    c_in: int
    c_out: int
    kernel: int = 1
    l_out: int = 1
    stride: int = 1
    padding: int = 0
    spike_input: bool = True

    def macs(self, batch: int = 1) -> int:
        if self.kind == "conv":
            return batch * self.l_out * self.c_out * self.c_in * self.kernel
        if self.kind == "linear":
            return batch * self.c_in * self.c_out
        raise ValueError(f"unknown layer kind {self.kind!r}")


def layer_specs(cfg: UNetConfig) -> list[LayerSpec]:
    """Every multiply-bearing layer of the network, in forward order."""
    k, pad, w, n = cfg.kernel, (cfg.kernel - 1) // 2, cfg.widths, cfg.levels
    specs = [
        LayerSpec("time", "linear", cfg.time_emb_dim, cfg.cond_dim, spike_input=False),
        LayerSpec("obs", "linear", cfg.obs_dim, cfg.cond_dim, spike_input=False),
        LayerSpec("enc.conv", "conv", cfg.action_dim, w[0], k, cfg.horizon, 1, pad, spike_input=False),
    ]

    def block(name, ci, co, length):
        return [
            LayerSpec(f"{name}.conv1", "conv", ci, co, k, length, 1, pad),
            LayerSpec(f"{name}.cond", "linear", cfg.cond_dim, co, spike_input=False),
            LayerSpec(f"{name}.conv2", "conv", co, co, k, length, 1, pad),
        ]

    length = cfg.horizon
    for i in range(n):
        specs += block(f"down{i}", w[i - 1] if i else w[0], w[i], length)
        if i < n - 1:
            length //= 2
            specs.append(LayerSpec(f"pool{i}.conv", "conv", w[i], w[i], 2, length, 2, 0))
    specs += block("mid", w[-1], w[-1], length)
    for i in range(n - 2, -1, -1):
        length *= 2
        specs.append(LayerSpec(f"upsample{i}.conv", "conv", w[i + 1], w[i], k, length, 1, pad))
        specs += block(f"up{i}", w[i], w[i], length)
    specs.append(LayerSpec("dec.conv", "conv", w[0], cfg.action_dim, k, cfg.horizon, 1, pad))
    return specs


def count_aops(cfg: UNetConfig, batch: int = 1) -> dict[str, int]:
    """Closed-form MAC count per layer for one dense forward pass."""
    return {s.name: s.macs(batch) for s in layer_specs(cfg)}


def firing_rate(spikes: np.ndarray) -> float:
    if spikes.size == 0:
        raise ValueError("empty spike train")
    return float(np.count_nonzero(spikes)) / spikes.size


def measure_firing_rate(net: SpikingUNet, x_noisy: np.ndarray, t_d, obs: np.ndarray) -> dict[str, float]:
    """Input firing rate of every spike-driven layer on one batch."""
    if x_noisy.shape[0] == 0:
        raise ValueError("empty batch")
    trace = Trace()
    net.forward(x_noisy, t_d, obs, trace=trace)
    return {s.name: firing_rate(trace.conv_inputs[s.name])
            for s in layer_specs(net.cfg) if s.spike_input}


@dataclass
class LayerEnergy:
    name: str
    spike_input: bool
    aops: float
    psi: float | None
    sops: float
    e_snn: float
    e_ann: float


@dataclass
class ScopeTotals:
    aops: float
    sops: float
    e_snn: float
    e_ann: float

    @property
    def reduction_percent(self) -> float:
        if self.e_ann <= 0:
            raise ZeroDivisionError("zero dense energy: reduction undefined")
        return 100.0 * (1.0 - self.e_snn / self.e_ann)


@dataclass
class EnergyReport:
    layers: list[LayerEnergy]
    steps: int
    constants: EnergyConstants
    diagnostics: dict[str, float] = field(default_factory=dict)

    def totals(self, scope: str = "network") -> ScopeTotals:
        if scope == "network":
            rows = self.layers
        elif scope == "spiking":
            rows = [r for r in self.layers if r.spike_input]
        else:
            raise ValueError(f"unknown scope {scope!r}")
        return ScopeTotals(
            sum(r.aops for r in rows), sum(r.sops for r in rows),
            sum(r.e_snn for r in rows), sum(r.e_ann for r in rows),
        )

    @property
    def reduction_percent(self) -> float:
        return self.totals("network").reduction_percent

    @property
    def mean_psi(self) -> float:
        """AOP-weighted input firing rate over spike-driven layers."""
        rows = [r for r in self.layers if r.spike_input]
        total = sum(r.aops for r in rows)
        return sum(r.aops * r.psi for r in rows) / total if total else 0.0


def implied_rate_product(reduction_percent: float, constants: EnergyConstants = EnergyConstants()) -> float:
    """``T_S * psi`` that yields ``reduction_percent`` when every layer is spike-driven."""
    return (1.0 - reduction_percent / 100.0) * constants.e_mac / constants.e_ac


def estimate_energy(aops: dict[str, float], psi: dict[str, float], steps: int,
                    constants: EnergyConstants = EnergyConstants(),
                    reference_reduction: float | None = 94.3) -> EnergyReport:
    """Layers present in ``psi`` are spike-driven; the rest are MAC-billed."""
    if steps < 1:
        raise ValueError("T_S must be >= 1")
    if any(v < 0 for v in aops.values()) or any(v < 0 for v in psi.values()):
        raise ValueError("AOPs and firing rates must be nonnegative")
    if sum(aops.values()) == 0:
        raise ZeroDivisionError("zero total AOPs")
    unknown = set(psi) - set(aops)
    if unknown:
        raise KeyError(f"firing rates for unknown layers: {sorted(unknown)}")
    rows = []
    for name, a in aops.items():
        e_ann = constants.e_mac * a
        if name in psi:
            sops = steps * psi[name] * a
            rows.append(LayerEnergy(name, True, a, psi[name], sops, constants.e_ac * sops, e_ann))
        else:
            rows.append(LayerEnergy(name, False, a, None, 0.0, e_ann, e_ann))
    report = EnergyReport(rows, steps, constants)
    if reference_reduction is not None:
        product = implied_rate_product(reference_reduction, constants)
        report.diagnostics = {
            "reference_reduction_percent": reference_reduction,
            "implied_ts_psi": product,
            "implied_psi_at_ts": product / steps,
        }
    return report


def profile_network(net: SpikingUNet, x_noisy, t_d, obs, constants=EnergyConstants(),
                    reference_reduction: float | None = 94.3) -> EnergyReport:
    psi = measure_firing_rate(net, x_noisy, t_d, obs)
    report = estimate_energy(count_aops(net.cfg, x_noisy.shape[0]), psi, net.cfg.steps,
                             constants, reference_reduction)
    report.diagnostics["mean_psi"] = report.mean_psi
    report.diagnostics["measured_ts_psi"] = net.cfg.steps * report.mean_psi
    return report


# ---------------------------------------------------------------- instrumented counting


def _tap_fanout(spec: LayerSpec, length: int, cropped: bool) -> np.ndarray:
    """Synapses per input position (per output channel).

    Event-driven scatter: an input at ``l`` drives output ``o`` through tap
    ``j`` whenever ``o*stride + j - padding == l``. With ``cropped=False``
    outputs outside ``[0, l_out)`` still count (the halo an event-driven
    accumulator writes and then discards).
    """
    fan = np.zeros(length, dtype=np.int64)
    for pos in range(length):
        for j in range(spec.kernel):
            q = pos + spec.padding - j
            if q % spec.stride:
                continue
            o = q // spec.stride
            if not cropped or 0 <= o < spec.l_out:
                fan[pos] += 1
    return fan


@dataclass
class InstrumentedCounts:
    macs: dict[str, int]
    accumulates: dict[str, int]
    accumulates_cropped: dict[str, int]


def instrumented_counts(net: SpikingUNet, x_noisy, t_d, obs) -> InstrumentedCounts:
    """Tally operations from an actual forward pass.

    ``macs``: one per multiply the dense conv/linear executes (padding taps
    included). ``accumulates``: one per incoming spike per synapse over all
    ``T_S`` steps (event-driven, halo included). ``accumulates_cropped``
    excludes synapses that land outside the output map.
    """
    trace = Trace()
    net.forward(x_noisy, t_d, obs, trace=trace)
    macs, acc, acc_crop = {}, {}, {}
    for spec in layer_specs(net.cfg):
        inp = trace.conv_inputs[spec.name]
        if spec.kind == "linear":
            macs[spec.name] = inp.shape[0] * inp.shape[1] * spec.c_out
            continue
        # replay the dense conv on one time slice and read the executed matmul shape
        tape = GradTape()
        dense_in = inp if inp.ndim == 3 else inp[0]
        conv1d_forward(dense_in, net.conv(spec.name, spec.stride, spec.padding), tape, "count")
        cols = tape.take("count")[0]
        macs[spec.name] = int(np.prod(cols.shape)) * spec.c_out  # [B, C_in*k, L_out] x C_out
        if not spec.spike_input:
            continue
        spikes_per_pos = np.count_nonzero(inp, axis=(0, 1, 2))  # over T, B, C
        length = inp.shape[-1]
        acc[spec.name] = int(spikes_per_pos @ _tap_fanout(spec, length, False)) * spec.c_out
        acc_crop[spec.name] = int(spikes_per_pos @ _tap_fanout(spec, length, True)) * spec.c_out
    return InstrumentedCounts(macs, acc, acc_crop)


# ---------------------------------------------------------------- output

LAYER_COLUMNS = ("layer", "billing", "aops", "psi", "sops", "e_snn", "e_ann")
SUMMARY_COLUMNS = ("key", "value")


def report_to_csv(report: EnergyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LAYER_COLUMNS)
    for r in report.layers:
        w.writerow([r.name, "ac" if r.spike_input else "mac", int(r.aops),
                    "" if r.psi is None else repr(r.psi), repr(r.sops), repr(r.e_snn), repr(r.e_ann)])
    for scope in ("network", "spiking"):
        t = report.totals(scope)
        w.writerow([f"TOTAL[{scope}]", "", int(t.aops), "", repr(t.sops), repr(t.e_snn), repr(t.e_ann)])
    return buf.getvalue()


def summary_to_csv(report: EnergyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    w.writerow(["t_s", report.steps])
    w.writerow(["e_ac", report.constants.e_ac])
    w.writerow(["e_mac", report.constants.e_mac])
    for scope in ("network", "spiking"):
        w.writerow([f"reduction_percent[{scope}]", repr(report.totals(scope).reduction_percent)])
    for key, value in report.diagnostics.items():
        w.writerow([key, repr(value)])
    return buf.getvalue()


def report_to_text(report: EnergyReport) -> str:
    lines = [f"{'layer':<18}{'bill':>5}{'AOPs':>14}{'psi':>8}{'SOPs':>14}{'E_SNN':>14}{'E_ANN':>14}"]
    for r in report.layers:
        psi = "-" if r.psi is None else f"{r.psi:.4f}"
        lines.append(f"{r.name:<18}{'ac' if r.spike_input else 'mac':>5}{r.aops:>14,.0f}{psi:>8}"
                     f"{r.sops:>14,.0f}{r.e_snn:>14,.1f}{r.e_ann:>14,.1f}")
    for scope in ("network", "spiking"):
        t = report.totals(scope)
        lines.append(f"{'TOTAL ' + scope:<18}{'':>5}{t.aops:>14,.0f}{'':>8}{t.sops:>14,.0f}"
                     f"{t.e_snn:>14,.1f}{t.e_ann:>14,.1f}   reduction {t.reduction_percent:.2f}%")
    lines.append(f"units: uJ/op as printed for E_AC={report.constants.e_ac}, E_MAC={report.constants.e_mac} "
                 "(conventionally pJ; the ratio is unit-free)")
    for key, value in report.diagnostics.items():
        lines.append(f"{key}: {value:.6g}")
    return "\n".join(lines) + "\n"
