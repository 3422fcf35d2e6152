"""SDPC checkpoint files: parameters, Adam state, epoch, and the run config.

Layout (little-endian)::

    "SDPC" | u32 version | 32-byte sha256 config digest
    | u32 epoch | u64 adam_step | u32 config_json_len | config_json (utf-8)
    | u32 n_params
    | per param: u16 name_len | name | u8 ndim | u32 dims[ndim]
                 | f32 value[...] | f32 adam_m[...] | f32 adam_v[...]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .toyenv import atomic_write_bytes

MAGIC = b"SDPC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    epoch: int  # completed epochs

    def to_bytes(self) -> bytes:
        cfg_json = self.config.to_json().encode()
        out = [MAGIC, struct.pack("<I", VERSION), self.config.digest(),
               struct.pack("<IQI", self.epoch, self.adam_step, len(cfg_json)), cfg_json,
               struct.pack("<I", len(self.params))]
        for name, value in self.params.items():
            raw = name.encode()
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
            for arr in (value, self.adam_m[name], self.adam_v[name]):
                if arr.shape != value.shape:
                    raise CheckpointError(f"optimizer state shape mismatch for {name}")
                out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not an SDPC checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = data[8:40]
        epoch, step, cfg_len = struct.unpack_from("<IQI", data, 40)
        off = 56
        config = RunConfig.from_json(data[off : off + cfg_len].decode())
        off += cfg_len
        if config.digest() != digest:
            raise CheckpointError("config digest does not match embedded config")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params, ms, vs = {}, {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            name = data[off + 2 : off + 2 + nlen].decode()
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arrays = []
            for _ in range(3):
                arr = np.frombuffer(data, dtype="<f4", count=size, offset=off)
                arrays.append(arr.astype(np.float32).reshape(shape))
                off += 4 * size
            params[name], ms[name], vs[name] = arrays
        if off != len(data):
            raise CheckpointError("trailing bytes in checkpoint")
        return cls(config, params, ms, vs, step, epoch)

    @property
    def digest(self) -> bytes:
        return self.config.digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    try:
        return Checkpoint.from_bytes(data)
    except CheckpointError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
