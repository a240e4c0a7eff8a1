"""Binary checkpoint files.

Layout (little-endian):

    b"MAPF"  uint32 version
    str kind  str config_text  uint64 step  str rng_summary
    uint32 record_count
    record*: str name, uint32 ndim, uint32 dims[ndim], float32 data[prod(dims)]

where ``str`` is a uint32 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MAPF"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str  # "denoiser" or "extractor"
    config_text: str
    step: int
    rng_summary: str
    tensors: dict[str, np.ndarray]


def rng_summary(seed: int, step: int) -> str:
    """Enough to reproduce the run: the seed and how far its streams advanced."""
    return f"seed={int(seed)} steps={int(step)}"


def state_tensors(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().astype(np.float32) for name, t in module.state_dict().items()}


def load_tensors(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, ref in expected.items():
        if tuple(ref.shape) != tensors[name].shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != {tuple(ref.shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(ckpt: Checkpoint) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _pack_str(ckpt.kind),
        _pack_str(ckpt.config_text),
        struct.pack("<Q", ckpt.step),
        _pack_str(ckpt.rng_summary),
        struct.pack("<I", len(ckpt.tensors)),
    ]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        parts += [_pack_str(name), struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape), arr.tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("checkpoint string is not UTF-8") from None


def decode(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    r = _Reader(blob)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    kind = r.string()
    config_text = r.string()
    (step,) = r.unpack("<Q")
    summary = r.string()
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after the last record")
    return Checkpoint(kind, config_text, step, summary, tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read {path}: {err.strerror}") from None
    return decode(blob)


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
