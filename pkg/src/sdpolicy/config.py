"""Run configuration: an INI-style file plus ``section.key=value`` overrides.

Example file::

    [data]
    n_traj = 200

    [model]
    widths = 32, 64
    t_s = 4

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from typing import Any

from .unet import UNetConfig

T_S_SWEEP = (1, 2, 4, 8)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: str  # int | float | str | bool | ints
    default: Any
    help: str


SCHEMA: dict[str, dict[str, Key]] = {
    "data": {
        "path": Key("str", "data/toypush.sdpd", "dataset file (SDPD format); eval/profile/stats default to the checkpoint's"),
        "n_traj": Key("int", 200, "trajectories written by gen-data"),
        "seed": Key("int", 0, "seed for gen-data initial states"),
    },
    "model": {
        "widths": Key("ints", [64, 128, 256], "channel width per U-Net level"),
        "horizon": Key("int", 16, "predicted action steps H"),
        "t_s": Key("int", 4, "SNN timesteps T_S"),
        "kernel": Key("int", 3, "conv kernel size (odd)"),
        "tau": Key("float", 0.5, "membrane decay constant"),
        "m_init": Key("float", 0.7, "initial raw threshold parameter"),
        "time_emb_dim": Key("int", 64, "sinusoidal timestep embedding size"),
        "cond_dim": Key("int", 64, "conditioning vector size"),
        "init_gain": Key("float", 2.0, "init bound multiplier on 1/sqrt(fan_in)"),
        "lcmt": Key("bool", True, "learn channel-wise thresholds (off: frozen at theta_fixed)"),
        "theta_fixed": Key("float", 0.5, "threshold used when lcmt is off"),
    },
    "diffusion": {
        "t_d": Key("int", 100, "diffusion steps T_D"),
        "schedule": Key("str", "linear", "beta schedule: linear | cosine"),
        "clip_sample": Key("bool", True, "clip the implied clean sample to [-1, 1] while sampling"),
    },
    "train": {
        "lr": Key("float", 1e-4, "Adam step size"),
        "lr_schedule": Key("str", "constant", "step-size schedule: constant | cosine (to 0 over train.epochs)"),
        "beta1": Key("float", 0.9, "Adam first-moment decay"),
        "beta2": Key("float", 0.999, "Adam second-moment decay"),
        "adam_eps": Key("float", 1e-8, "Adam denominator epsilon"),
        "batch_size": Key("int", 256, "windows per optimizer step"),
        "epochs": Key("int", 100, "passes over the window set"),
        "seed": Key("int", 0, "init and batch-sampling seed"),
        "ckpt_every": Key("int", 50, "checkpoint cadence in epochs"),
        "out_dir": Key("str", "runs/default", "directory for checkpoints and logs"),
        "action_mse_every": Key("int", 0, "epochs between sampled-action MSE probes (0: never)"),
        "action_mse_windows": Key("int", 32, "windows in the action-MSE probe"),
        "eval_every": Key("int", 0, "epochs between closed-loop evaluations (0: never)"),
        "eval_episodes": Key("int", 20, "episodes per in-training evaluation"),
        "max_minutes": Key("float", 0.0, "stop after this wall time (0: unlimited)"),
    },
    "eval": {
        "n_episodes": Key("int", 50, "closed-loop episodes"),
        "seed": Key("int", 1000, "master seed for episode initial states and sampling"),
        "exec_horizon": Key("int", 4, "actions executed before replanning"),
        "max_steps": Key("int", 300, "episode step cap"),
    },
    "energy": {
        "e_ac": Key("float", 0.9, "energy per accumulate"),
        "e_mac": Key("float", 4.6, "energy per multiply-accumulate"),
        "batch": Key("int", 16, "windows used to measure firing rates"),
        "reference_reduction": Key("float", 94.3, "reduction percent for the implied-rate diagnostic"),
    },
    "stats": {
        "n_samples": Key("int", 16, "windows used for channel statistics"),
        "seed": Key("int", 0, "noise/timestep seed for statistics"),
    },
}

# sections that change the network function; checked on eval/profile
DIGEST_SECTIONS = ("model", "diffusion")


def _parse(section: str, key: str, raw: str) -> Any:
    spec = SCHEMA[section][key]
    text = raw.strip()
    try:
        if spec.type == "int":
            return int(text)
        if spec.type == "float":
            return float(text)
        if spec.type == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if spec.type == "ints":
            return [int(v) for v in text.strip("[]").replace(",", " ").split()]
        return text
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {spec.type}") from None


class RunConfig:
    """Nested ``{section: {key: value}}`` view with attribute access per section."""

    def __init__(self, values: dict[str, dict[str, Any]] | None = None):
        self.values = {s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()}
        self.explicit: set[str] = set()  # dotted keys given by a config file or override
        for section, items in (values or {}).items():
            for key, value in items.items():
                self.set(section, key, value)
        self.validate()

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        if isinstance(value, str) and SCHEMA[section][key].type != "str":
            value = _parse(section, key, value)
        self.values[section][key] = value

    def get(self, dotted: str) -> Any:
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def validate(self) -> list[str]:
        notices = []
        m, d = self.values["model"], self.values["diffusion"]
        if m["t_s"] < 1:
            raise ConfigError("model.t_s must be >= 1")
        if m["t_s"] not in T_S_SWEEP:
            notices.append(f"model.t_s={m['t_s']} is outside the usual sweep {T_S_SWEEP}")
        if d["t_d"] < 1:
            raise ConfigError("diffusion.t_d must be >= 1")
        if d["schedule"] not in ("linear", "cosine"):
            raise ConfigError(f"diffusion.schedule must be linear or cosine, got {d['schedule']!r}")
        if self.values["train"]["lr_schedule"] not in ("constant", "cosine"):
            raise ConfigError("train.lr_schedule must be constant or cosine")
        if not -1 < m["theta_fixed"] < 1:
            raise ConfigError("model.theta_fixed must lie in (-1, 1)")
        try:
            self.unet_config()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        return notices

    def unet_config(self) -> UNetConfig:
        m = self.values["model"]
        return UNetConfig(
            widths=list(m["widths"]), horizon=m["horizon"], steps=m["t_s"], kernel=m["kernel"],
            tau=m["tau"], m_init=m["m_init"], time_emb_dim=m["time_emb_dim"],
            cond_dim=m["cond_dim"], init_gain=m["init_gain"], lcmt=m["lcmt"],
            theta_fixed=m["theta_fixed"],
        )

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(json.loads(text))

    def digest(self) -> bytes:
        sub = {s: self.values[s] for s in DIGEST_SECTIONS}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).digest()

    def to_ini(self) -> str:
        lines = []
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            for key, value in items.items():
                if isinstance(value, list):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
                cfg.explicit.add(f"{section}.{key}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = dotted.strip().split(".", 1)
        cfg.set(section, key, raw)
        cfg.explicit.add(f"{section}.{key}")
    cfg.validate()
    return cfg


def schema_help() -> str:
    lines = ["config keys (file sections or --set section.key=value):"]
    for section, keys in SCHEMA.items():
        for key, spec in keys.items():
            default = spec.default
            if isinstance(default, list):
                default = ",".join(map(str, default))
            dotted = f"{section}.{key}"
            lines.append(f"  {dotted:<28} {spec.type:<6} default={default!s:<18} {spec.help}")
    return "\n".join(lines)
