"""Desk-scale pushing benchmark: point agent, circular block, fixed target.

Geometry lives in the unit square. The agent moves by a clipped velocity
command; if it ends a step closer than ``CONTACT_RADIUS`` to the block
centre, the block is pushed out along the contact normal until the distance
is exactly ``CONTACT_RADIUS`` (rigid push, never pull).
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

A_MAX = 0.05
CONTACT_RADIUS = 0.04
SUCCESS_TOL = 0.03
MAX_STEPS = 300
TARGET = (0.5, 0.5)
OBS_DIM = 6
ACT_DIM = 2
OBS_FRAMES = 2
EXEC_HORIZON = 4

DATASET_MAGIC = b"SDPD"
DATASET_VERSION = 1
METRICS_COLUMNS = ("n_episodes", "seed", "success_rate", "mean_steps", "coverage")

_U64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _U64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


def episode_seed(master: int, index: int) -> int:
    """Per-episode seed: splitmix64 of ``master`` advanced ``index + 1`` times."""
    return splitmix64((master + (index + 1) * 0x9E3779B97F4A7C15) & _U64)


@dataclass
class EnvState:
    agent_pos: np.ndarray
    block_pos: np.ndarray
    target_pos: np.ndarray = field(default_factory=lambda: np.array(TARGET))
    step_count: int = 0

    def to_obs(self) -> np.ndarray:
        return np.concatenate([self.agent_pos, self.block_pos, self.target_pos])

    def copy(self) -> "EnvState":
        return EnvState(self.agent_pos.copy(), self.block_pos.copy(), self.target_pos.copy(),
                        self.step_count)

    def block_distance(self) -> float:
        return float(np.linalg.norm(self.block_pos - self.target_pos))

    def solved(self) -> bool:
        return self.block_distance() < SUCCESS_TOL


def random_state(rng: np.random.Generator) -> EnvState:
    target = np.array(TARGET)
    while True:
        block = rng.uniform(0.15, 0.85, size=2)
        if np.linalg.norm(block - target) >= 0.15:
            break
    while True:
        agent = rng.uniform(0.05, 0.95, size=2)
        if np.linalg.norm(agent - block) >= 0.1:
            break
    return EnvState(agent, block, target)


def env_step(state: EnvState, action) -> EnvState:
    act = np.clip(np.asarray(action, dtype=np.float64), -A_MAX, A_MAX)
    agent = np.clip(state.agent_pos + act, 0.0, 1.0)
    block = state.block_pos.copy()
    offset = block - agent
    dist = float(np.hypot(offset[0], offset[1]))
    if dist < CONTACT_RADIUS:
        if dist > 1e-12:
            normal = offset / dist
        else:
            n = float(np.hypot(act[0], act[1]))
            normal = act / n if n > 0 else np.array([1.0, 0.0])
        block = np.clip(agent + normal * CONTACT_RADIUS, 0.0, 1.0)
    return EnvState(agent, block, state.target_pos.copy(), state.step_count + 1)


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.hypot(v[0], v[1]))
    return v / n if n > 1e-12 else np.zeros(2)


def _clip_norm(v: np.ndarray, limit: float = A_MAX) -> np.ndarray:
    n = float(np.hypot(v[0], v[1]))
    return v * (limit / n) if n > limit else v


PUSH_STEP = 0.02  # block advance per push step; keeps the agent well behind the centre
STATION_GAP = A_MAX - PUSH_STEP  # a full-speed step from the station is the first push
ORBIT_RADIUS = 0.08
ORBIT_STEP = np.pi / 4


def push_station(state: EnvState) -> np.ndarray:
    direction = _unit(state.target_pos - state.block_pos)
    return state.block_pos - direction * (CONTACT_RADIUS + STATION_GAP)


def scripted_expert(state: EnvState) -> np.ndarray:
    """Go behind the block (orbiting around it if needed), then push."""
    to_target = state.target_pos - state.block_pos
    dist = float(np.hypot(*to_target))
    if dist < SUCCESS_TOL:
        return np.zeros(2)
    direction = to_target / dist
    rel = state.agent_pos - state.block_pos
    r = float(np.hypot(*rel))

    behind = float(rel @ -direction) > 0.95 * r
    if behind and r < CONTACT_RADIUS + STATION_GAP + 1e-6:
        goal = state.block_pos - direction * (CONTACT_RADIUS - min(PUSH_STEP, dist))
        return _clip_norm(goal - state.agent_pos)

    phi_a = np.arctan2(rel[1], rel[0])
    phi_s = np.arctan2(-direction[1], -direction[0])
    delta = (phi_s - phi_a + np.pi) % (2 * np.pi) - np.pi
    if abs(delta) <= ORBIT_STEP * 0.5 and r > CONTACT_RADIUS:
        goal = push_station(state)
    else:
        phi = phi_a + np.sign(delta) * min(abs(delta), ORBIT_STEP)
        goal = state.block_pos + ORBIT_RADIUS * np.array([np.cos(phi), np.sin(phi)])
    return _clip_norm(goal - state.agent_pos)


# ---------------------------------------------------------------- rollouts


@dataclass
class Trajectory:
    observations: np.ndarray  # [n+1, 6] float32
    actions: np.ndarray  # [n, 2] float32
    success: bool

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.success == other.success
                and np.array_equal(self.observations, other.observations)
                and np.array_equal(self.actions, other.actions))


def rollout_expert(state: EnvState, max_steps: int = MAX_STEPS) -> Trajectory:
    obs, acts = [state.to_obs()], []
    while not state.solved() and state.step_count < max_steps:
        a = scripted_expert(state)
        state = env_step(state, a)
        acts.append(a)
        obs.append(state.to_obs())
    return Trajectory(np.asarray(obs, dtype=np.float32),
                      np.asarray(acts, dtype=np.float32).reshape(-1, ACT_DIM), state.solved())


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    action_min: np.ndarray  # [2] float32
    action_max: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.trajectories == other.trajectories
                and np.array_equal(self.action_min, other.action_min)
                and np.array_equal(self.action_max, other.action_max))

    @classmethod
    def from_trajectories(cls, trajs: list[Trajectory]) -> "Dataset":
        acts = np.concatenate([t.actions for t in trajs])
        return cls(trajs, acts.min(axis=0).astype(np.float32), acts.max(axis=0).astype(np.float32))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_bytes(ds: Dataset) -> bytes:
    """Little-endian layout::

        "SDPD" | u32 version | u32 n_traj | u32 obs_dim | u32 act_dim
        | f32[act_dim] action_min | f32[act_dim] action_max
        | per trajectory: u32 n_actions | u32 success
                          | f32[(n+1)*obs_dim] obs | f32[n*act_dim] actions
    """
    parts = [DATASET_MAGIC, struct.pack("<4I", DATASET_VERSION, len(ds.trajectories), OBS_DIM, ACT_DIM),
             ds.action_min.astype("<f4").tobytes(), ds.action_max.astype("<f4").tobytes()]
    for tr in ds.trajectories:
        parts.append(struct.pack("<2I", len(tr.actions), int(tr.success)))
        parts.append(tr.observations.astype("<f4").tobytes())
        parts.append(tr.actions.astype("<f4").tobytes())
    return b"".join(parts)


class DatasetFormatError(ValueError):
    pass


def dataset_from_bytes(data: bytes) -> Dataset:
    try:
        return _parse_dataset(data)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"truncated or corrupt dataset: {exc}") from None


def _parse_dataset(data: bytes) -> Dataset:
    if data[:4] != DATASET_MAGIC:
        raise DatasetFormatError("not an SDPD dataset (bad magic)")
    version, n, obs_dim, act_dim = struct.unpack_from("<4I", data, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    off = 20

    def floats(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
        off += 4 * count
        return arr

    amin, amax = floats(act_dim), floats(act_dim)
    trajs = []
    for _ in range(n):
        steps, success = struct.unpack_from("<2I", data, off)
        off += 8
        obs = floats((steps + 1) * obs_dim).reshape(steps + 1, obs_dim)
        acts = floats(steps * act_dim).reshape(steps, act_dim)
        trajs.append(Trajectory(obs, acts, bool(success)))
    if off != len(data):
        raise DatasetFormatError("trailing bytes after last trajectory")
    return Dataset(trajs, amin, amax)


def write_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_to_bytes(ds))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def generate_dataset(n_traj: int, seed: int, path=None) -> Dataset:
    """Expert rollouts from seeded random starts; failed episodes are resampled."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    trajs: list[Trajectory] = []
    attempts = 0
    while len(trajs) < n_traj:
        if attempts >= 10 * n_traj:
            raise RuntimeError(f"expert failed too often: {len(trajs)} successes in {attempts} tries")
        rng = np.random.default_rng(episode_seed(seed, attempts))
        attempts += 1
        tr = rollout_expert(random_state(rng))
        if tr.success:
            trajs.append(tr)
    ds = Dataset.from_trajectories(trajs)
    if path is not None:
        write_dataset(ds, path)
    return ds


# ---------------------------------------------------------------- evaluation

Policy = Callable[[np.ndarray], np.ndarray]
"""Maps observation windows [N, OBS_FRAMES*OBS_DIM] to action plans [N, H, 2]."""


def obs_window(history: list[np.ndarray]) -> np.ndarray:
    frames = history[-OBS_FRAMES:]
    while len(frames) < OBS_FRAMES:
        frames = [frames[0]] + frames
    return np.concatenate(frames).astype(np.float32)


def evaluate_policy(policy: Policy, n_episodes: int, seed: int, max_steps: int = MAX_STEPS,
                    exec_horizon: int = EXEC_HORIZON) -> dict:
    """Receding-horizon rollouts, all episodes stepped in lockstep as one batch."""
    states = [random_state(np.random.default_rng(episode_seed(seed, i))) for i in range(n_episodes)]
    initial = np.array([s.block_distance() for s in states])
    history = [[s.to_obs()] for s in states]
    done = [s.solved() for s in states]
    steps_taken = np.zeros(n_episodes, dtype=np.int64)

    while not all(done):
        active = [i for i in range(n_episodes) if not done[i]]
        plans = np.asarray(policy(np.stack([obs_window(history[i]) for i in active])))
        for row, i in enumerate(active):
            for a in plans[row, :exec_horizon]:
                states[i] = env_step(states[i], a)
                history[i].append(states[i].to_obs())
                steps_taken[i] += 1
                if states[i].solved() or states[i].step_count >= max_steps:
                    done[i] = True
                    break

    final = np.array([s.block_distance() for s in states])
    success = np.array([s.solved() for s in states])
    coverage = np.clip(1.0 - final / initial, 0.0, 1.0)
    return {
        "n_episodes": n_episodes,
        "seed": seed,
        "success_rate": float(success.mean()),
        "mean_steps": float(steps_taken.mean()),
        "coverage": float(coverage.mean()),
    }


def expert_policy(horizon: int = 16) -> Policy:
    """Scripted expert as a plan-producing policy (plans by simulating ahead)."""

    def policy(windows: np.ndarray) -> np.ndarray:
        plans = np.zeros((len(windows), horizon, ACT_DIM))
        for n, w in enumerate(windows):
            cur = w[-OBS_DIM:].astype(np.float64)
            state = EnvState(cur[0:2].copy(), cur[2:4].copy(), cur[4:6].copy())
            for h in range(horizon):
                a = scripted_expert(state)
                plans[n, h] = a
                state = env_step(state, a)
        return plans

    return policy


def write_metrics_csv(metrics: dict, path) -> None:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    writer.writerow([metrics[c] for c in METRICS_COLUMNS])
    atomic_write_bytes(path, buf.getvalue().encode())
