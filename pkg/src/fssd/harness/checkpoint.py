"""Binary named-tensor archive.

Layout (little-endian)::

    b"FSSD" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 values
    u32 CRC32 of every preceding byte

The step counter, the model config JSON and its hash travel as ordinary
tensors under the reserved ``__meta__.`` prefix (config bytes stored one
per float).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

MAGIC = b"FSSD"
VERSION = 1
META = "__meta__."


class CheckpointError(ValueError):
    """Corrupt, truncated or foreign checkpoint file."""


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    step: int = 0
    config: Optional[dict] = None
    config_hash: str = ""

    def model_tensors(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}

    def optimizer_tensors(self) -> Dict[str, np.ndarray]:
        p = "optim.velocity."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _bytes_tensor(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype=np.uint8).astype(np.float32)


def encode(ckpt: Checkpoint) -> bytes:
    named: List[Tuple[str, np.ndarray]] = list(ckpt.tensors.items())
    named.append((META + "step", np.asarray(float(ckpt.step), dtype=np.float32)))
    if ckpt.config is not None:
        named.append((META + "config", _bytes_tensor(json.dumps(ckpt.config, sort_keys=True).encode())))
    if ckpt.config_hash:
        named.append((META + "config_hash", _bytes_tensor(ckpt.config_hash.encode())))
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, file ends at {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not an FSSD checkpoint")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(4 * size, f"values of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = values.astype(np.float32)
    end = r.pos
    (crc,) = r.unpack("<I", "CRC32")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after CRC at offset {r.pos}")
    if zlib.crc32(buf[:end]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"CRC mismatch over bytes [0, {end})")
    step = int(tensors.pop(META + "step", np.zeros(())).item())
    cfg_raw = tensors.pop(META + "config", None)
    hash_raw = tensors.pop(META + "config_hash", None)
    config = json.loads(cfg_raw.astype(np.uint8).tobytes()) if cfg_raw is not None else None
    config_hash = hash_raw.astype(np.uint8).tobytes().decode() if hash_raw is not None else ""
    return Checkpoint(tensors, step, config, config_hash)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


@dataclass
class LoadReport:
    loaded: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)  # in the model, absent from the checkpoint
    unexpected: List[str] = field(default_factory=list)  # in the checkpoint, absent from the model
    mismatched: List[str] = field(default_factory=list)  # same name, different shape


def load_state(model, tensors: Mapping[str, np.ndarray]) -> LoadReport:
    """Copy checkpoint arrays into ``model`` by name; anything else is reported, not raised."""
    report = LoadReport()
    state = model.state()
    for name, arr in state.items():
        src = tensors.get(name)
        if src is None:
            report.missing.append(name)
        elif src.shape != arr.shape:
            report.mismatched.append(name)
        else:
            arr[...] = src.astype(arr.dtype)
            report.loaded.append(name)
    report.unexpected = [k for k in tensors if k not in state]
    return report
