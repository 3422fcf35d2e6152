"""Training loop, receding-horizon policy wrapper, evaluation and statistics."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import DiffusionBatch, NoiseSchedule, ddpm_sample, loss_eps_mse, make_schedule
from .lif import theta_of_m
from .tensor import NonFiniteError
from .toyenv import (
    ACT_DIM,
    OBS_DIM,
    OBS_FRAMES,
    Dataset,
    atomic_write_bytes,
    evaluate_policy,
    read_dataset,
)
from .unet import SpikingUNet, Trace, lif_names

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss", "action_mse", "eval_success", "eval_coverage", "wall_time")
STATS_COLUMNS = ("layer", "channel", "firing_rate", "firing_potential", "theta")


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------- data


def normalize_obs(obs: np.ndarray) -> np.ndarray:
    """Unit-square coordinates -> [-1, 1]."""
    return (obs * 2.0 - 1.0).astype(np.float32)


@dataclass
class ActionScaler:
    low: np.ndarray
    high: np.ndarray

    def normalize(self, a: np.ndarray) -> np.ndarray:
        span = np.where(self.high > self.low, self.high - self.low, 1.0)
        return (2.0 * (a - self.low) / span - 1.0).astype(np.float32)

    def unnormalize(self, a: np.ndarray) -> np.ndarray:
        span = np.where(self.high > self.low, self.high - self.low, 1.0)
        return (a + 1.0) * 0.5 * span + self.low


def build_windows(ds: Dataset, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Every (observation window, next-H-actions) pair of every trajectory.

    Observation window at step i: frames i-1 and i (frame 0 repeated at the
    start). Actions past the episode end are zero (the expert's idle action).
    Returns normalized ``obs [N, 12]`` and ``actions [N, H, 2]``.
    """
    scaler = ActionScaler(ds.action_min, ds.action_max)
    obs_rows, act_rows = [], []
    for tr in ds.trajectories:
        n = len(tr.actions)
        padded = np.concatenate([tr.actions, np.zeros((horizon, ACT_DIM), np.float32)])
        for i in range(n):
            frames = [tr.observations[max(i - k, 0)] for k in range(OBS_FRAMES - 1, -1, -1)]
            obs_rows.append(np.concatenate(frames))
            act_rows.append(padded[i : i + horizon])
    obs = normalize_obs(np.asarray(obs_rows, dtype=np.float32))
    acts = scaler.normalize(np.asarray(act_rows, dtype=np.float32))
    return obs, acts


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], frozen=()):
        self.step_count += 1
        t = self.step_count
        f = np.float32
        b1, b2 = f(self.beta1), f(self.beta2)
        lr_t = f(self.lr * np.sqrt(1 - self.beta2 ** t) / (1 - self.beta1 ** t))
        for name, g in grads.items():
            if name in frozen:
                continue
            g = g.astype(np.float32, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= lr_t * m / (np.sqrt(v) + f(self.eps))


# ---------------------------------------------------------------- policy


class DiffusionPolicy:
    """Observation windows -> raw action plans via DDPM sampling."""

    def __init__(self, net: SpikingUNet, sched: NoiseSchedule, scaler: ActionScaler,
                 seed: int = 0, clip_sample: bool = True):
        self.net, self.sched, self.scaler = net, sched, scaler
        self.rng = np.random.default_rng(seed)
        self.clip_sample = clip_sample

    def plan_normalized(self, obs_norm: np.ndarray) -> np.ndarray:
        cfg = self.net.cfg
        shape = (obs_norm.shape[0], cfg.horizon, cfg.action_dim)
        return ddpm_sample(lambda x, t, o: self.net.forward(x, t, o), obs_norm, self.sched, shape,
                           self.rng, clip_sample=self.clip_sample)

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        plan = self.plan_normalized(normalize_obs(np.asarray(windows, dtype=np.float32)))
        return self.scaler.unnormalize(np.clip(plan, -1.0, 1.0))


def scheduled_lr(base: float, schedule: str, step: int, total_steps: int) -> float:
    """Step size for optimizer step ``step`` (0-based) of ``total_steps``."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        frac = min(step, total_steps) / max(total_steps, 1)
        return base * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def select_best(results: list[tuple[int, float]]) -> int:
    """Epoch with the highest success; ties go to the earliest epoch."""
    if not results:
        raise ValueError("no checkpoint results")
    return min(results, key=lambda r: (-r[1], r[0]))[0]


# ---------------------------------------------------------------- training


def _metrics_header_needed(path: Path) -> bool:
    return not path.exists() or path.stat().st_size == 0


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def append_metrics(path: Path, row: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _metrics_header_needed(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(METRICS_COLUMNS)
        w.writerow([row["epoch"]] + [_fmt(row[c]) for c in METRICS_COLUMNS[1:]])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_model(cfg: RunConfig, params: dict | None = None) -> SpikingUNet:
    ucfg = cfg.unet_config()
    if params is None:
        return SpikingUNet.create(ucfg, seed=cfg["train"]["seed"])
    return SpikingUNet(ucfg, params)


def frozen_params(net: SpikingUNet) -> set[str]:
    if net.cfg.lcmt:
        return set()
    return {f"{name}.m" for name in lif_names(net.cfg)}


def action_mse(net, sched, obs, acts, seed: int, clip_sample: bool) -> float:
    shape = acts.shape
    pred = ddpm_sample(lambda x, t, o: net.forward(x, t, o), obs, sched, shape, seed,
                       clip_sample=clip_sample)
    return float(np.mean((np.clip(pred, -1, 1) - acts) ** 2))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics_path: Path
    checkpoints: list[Path]


def train(cfg: RunConfig, resume: str | None = None, epochs: int | None = None) -> TrainResult:
    """Adam on the noise-prediction loss; deterministic given the config seeds.

    Each epoch draws its permutation, timesteps and noise from a generator
    seeded with ``(train.seed, epoch)``, so resuming from a checkpoint
    replays the remaining epochs exactly.
    """
    tcfg = cfg["train"]
    out = Path(tcfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ds = read_dataset(cfg["data"]["path"])
    obs, acts = build_windows(ds, cfg["model"]["horizon"])
    sched = make_schedule(cfg["diffusion"]["schedule"], cfg["diffusion"]["t_d"])
    scaler = ActionScaler(ds.action_min, ds.action_max)

    if resume:
        ck = load_checkpoint(resume)
        if ck.config.digest() != cfg.digest():
            raise ValueError("checkpoint config digest differs from the requested config")
        net = build_model(cfg, ck.params)
        opt = Adam(net.params, tcfg["lr"], tcfg["beta1"], tcfg["beta2"], tcfg["adam_eps"])
        opt.m, opt.v, opt.step_count = ck.adam_m, ck.adam_v, ck.adam_step
        start = ck.epoch
    else:
        net = build_model(cfg)
        opt = Adam(net.params, tcfg["lr"], tcfg["beta1"], tcfg["beta2"], tcfg["adam_eps"])
        start = 0
    frozen = frozen_params(net)
    total_epochs = tcfg["epochs"] if epochs is None else epochs

    probe = np.random.default_rng([tcfg["seed"], 7919]).permutation(len(obs))[: tcfg["action_mse_windows"]]
    metrics_path = out / "metrics.csv"
    saved: list[Path] = []
    t0 = time.perf_counter()
    batch_size = tcfg["batch_size"]
    total_steps = tcfg["epochs"] * -(-len(obs) // batch_size)  # schedule horizon ignores early stops
    epoch = start

    def snapshot(ep: int) -> Checkpoint:
        return Checkpoint(cfg, {k: v.copy() for k, v in net.params.items()},
                          {k: v.copy() for k, v in opt.m.items()},
                          {k: v.copy() for k, v in opt.v.items()}, opt.step_count, ep)

    for epoch in range(start, total_epochs):
        rng = np.random.default_rng([tcfg["seed"], epoch])
        perm = rng.permutation(len(obs))
        losses = []
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo : lo + batch_size]
            batch = DiffusionBatch.sample(acts[idx], obs[idx], sched, rng)
            try:
                loss, grads = loss_eps_mse(net, batch, sched)
            except NonFiniteError as exc:
                dump = out / f"nonfinite_epoch{epoch}.npz"
                np.savez(dump, x0=batch.x0, obs=batch.obs, t=batch.t, eps=batch.eps)
                raise NumericError(f"non-finite value at epoch {epoch}; batch saved to {dump}") from exc
            opt.lr = scheduled_lr(tcfg["lr"], tcfg["lr_schedule"], opt.step_count, total_steps)
            opt.step(net.params, grads, frozen)
            losses.append(loss * len(idx))
        train_loss = sum(losses) / len(perm)

        done = epoch + 1
        row = {"epoch": epoch, "train_loss": train_loss, "action_mse": None,
               "eval_success": None, "eval_coverage": None}
        every = tcfg["action_mse_every"]
        if every and done % every == 0:
            row["action_mse"] = action_mse(net, sched, obs[probe], acts[probe], tcfg["seed"],
                                           cfg["diffusion"]["clip_sample"])
        every = tcfg["eval_every"]
        if every and done % every == 0:
            m = evaluate(net, sched, scaler, cfg, n_episodes=tcfg["eval_episodes"])
            row["eval_success"], row["eval_coverage"] = m["success_rate"], m["coverage"]
        row["wall_time"] = time.perf_counter() - t0
        append_metrics(metrics_path, row)
        log.info("epoch %d loss %.4f", epoch, train_loss)

        out_of_time = tcfg["max_minutes"] > 0 and row["wall_time"] > 60 * tcfg["max_minutes"]
        if done % tcfg["ckpt_every"] == 0 or done == total_epochs or out_of_time:
            ck = snapshot(done)
            path = out / f"ckpt_epoch{done:04d}.sdpc"
            save_checkpoint(ck, path)
            save_checkpoint(ck, out / "last.sdpc")
            saved.append(path)
        if out_of_time:
            break

    final = snapshot(epoch + 1 if total_epochs > start else start)
    return TrainResult(final, metrics_path, saved)


# ---------------------------------------------------------------- evaluation


def evaluate(net, sched, scaler, cfg: RunConfig, n_episodes: int | None = None,
             seed: int | None = None) -> dict:
    e = cfg["eval"]
    seed = e["seed"] if seed is None else seed
    policy = DiffusionPolicy(net, sched, scaler, seed=seed, clip_sample=cfg["diffusion"]["clip_sample"])
    return evaluate_policy(policy, e["n_episodes"] if n_episodes is None else n_episodes, seed,
                           max_steps=e["max_steps"], exec_horizon=e["exec_horizon"])


def check_digest(ck: Checkpoint, requested: RunConfig | None) -> None:
    if requested is not None and ck.config.digest() != requested.digest():
        raise ValueError("checkpoint config digest differs from the requested eval config")


def eval_checkpoint(path, n_episodes: int, seed: int, requested: RunConfig | None = None,
                    dataset_path: str | None = None, strict: bool = True) -> dict:
    """Closed-loop evaluation of a saved policy.

    The network and sampler come from the checkpoint; the ``eval`` section of
    ``requested`` (when given) sets the rollout protocol. With ``strict`` a
    model/diffusion mismatch between the two configs is an error.
    """
    ck = load_checkpoint(path)
    if strict:
        check_digest(ck, requested)
    cfg = ck.config
    if requested is not None:
        cfg = RunConfig.from_json(ck.config.to_json())
        cfg.values["eval"] = dict(requested["eval"])
    ds = read_dataset(dataset_path or cfg["data"]["path"])
    net = build_model(ck.config, ck.params)
    sched = make_schedule(cfg["diffusion"]["schedule"], cfg["diffusion"]["t_d"])
    return evaluate(net, sched, ActionScaler(ds.action_min, ds.action_max), cfg, n_episodes, seed)


# ---------------------------------------------------------------- statistics


def sample_inputs(cfg: RunConfig, ds: Dataset, n: int, seed: int):
    """Noised training windows for firing-rate/statistics probes."""
    if n < 1:
        raise ValueError("empty sample")
    obs, acts = build_windows(ds, cfg["model"]["horizon"])
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(obs), size=min(n, len(obs)), replace=False)
    sched = make_schedule(cfg["diffusion"]["schedule"], cfg["diffusion"]["t_d"])
    batch = DiffusionBatch.sample(acts[idx], obs[idx], sched, rng)
    from .diffusion import forward_diffuse

    return forward_diffuse(batch.x0, batch.t, batch.eps, sched), batch.t, batch.obs


def channel_stats(net: SpikingUNet, x_noisy, t, obs) -> list[dict]:
    """Per LIF layer and channel: firing rate, mean potential at firing, threshold."""
    from .tensor import GradTape

    tape = GradTape()
    trace = Trace()
    net.forward(x_noisy, t, obs, tape, trace=trace)
    rows = []
    for name in lif_names(net.cfg):
        u, s = trace.lif_states[name]
        theta = theta_of_m(net.params[f"{name}.m"])
        axes = tuple(a for a in range(u.ndim) if a != 2)
        rate = s.mean(axis=axes, dtype=np.float64)
        fired = s.sum(axis=axes, dtype=np.float64)
        potential = (u * s).sum(axis=axes, dtype=np.float64)
        for c in range(u.shape[2]):
            rows.append({
                "layer": name, "channel": c, "firing_rate": float(rate[c]),
                "firing_potential": float(potential[c] / fired[c]) if fired[c] else None,
                "theta": float(theta[c]),
            })
    return rows


def stats_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_COLUMNS)
    for r in rows:
        w.writerow([r["layer"], r["channel"], repr(r["firing_rate"]),
                    "" if r["firing_potential"] is None else repr(r["firing_potential"]),
                    repr(r["theta"])])
    return buf.getvalue()


# ---------------------------------------------------------------- loss chart


def loss_svg(rows: list[dict], column: str = "train_loss", width: int = 480, height: int = 240) -> str:
    """Minimal SVG polyline of one metrics column against epoch."""
    pts = [(float(r["epoch"]), float(r[column])) for r in rows if r.get(column) not in (None, "")]
    pad = 30
    body = ""
    if pts:
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
        y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1
        coords = " ".join(
            f"{pad + (x - x0) / (x1 - x0) * (width - 2 * pad):.1f},"
            f"{height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad):.1f}" for x, y in pts
        )
        body = (f'<polyline fill="none" stroke="black" points="{coords}"/>'
                f'<text x="{pad}" y="{pad - 8}" font-size="10">{column}: {y1:.4g} .. {y0:.4g}</text>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
            f'fill="none" stroke="#999"/>{body}</svg>\n')


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())
