"""Binary checkpoint format for named float tensors.

Layout (all integers u32 little-endian)::

    b"PKDC" | version | count | count x (name_len, name utf-8, rank, dims[rank], f32 data)

Tensors are stored row-major as float32, so float32 parameters round-trip
bit-exactly.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CacheIntegrityError

MAGIC = b"PKDC"
VERSION = 1


def atomic_write(path: str | Path, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CacheIntegrityError(f"{self.what} is truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CacheIntegrityError(f"{self.what} holds an invalid UTF-8 name") from e


def decode_checkpoint(buf: bytes) -> dict[str, torch.Tensor]:
    r = _Reader(buf, "checkpoint")
    if r.take(4) != MAGIC:
        raise CacheIntegrityError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CacheIntegrityError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = [r.u32() for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(buf):
        raise CacheIntegrityError("trailing bytes after checkpoint payload")
    return out


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    atomic_write(path, encode_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    return decode_checkpoint(Path(path).read_bytes())


def save_module(path: str | Path, module: torch.nn.Module) -> None:
    save_checkpoint(path, dict(module.state_dict()))


def load_module(path: str | Path, module: torch.nn.Module) -> torch.nn.Module:
    state = load_checkpoint(path)
    missing = set(module.state_dict()) ^ set(state)
    if missing:
        raise CacheIntegrityError(f"checkpoint keys do not match the module: {sorted(missing)[:5]}")
    module.load_state_dict(state)
    return module
