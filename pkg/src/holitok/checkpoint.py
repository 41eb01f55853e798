"""Binary tensor container shared by checkpoints and latent files.

Layout (all little-endian)::

    b"HTOK" | u32 version | u32 tensor count
    per tensor: u32 name length | name (utf-8) | u8 dtype code | u8 rank | u64 dims[rank] | payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"HTOK"
VERSION = 1
META_KEY = "__meta__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}
_TORCH = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def write_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> None:
    items = dict(tensors)
    if meta is not None:
        items[META_KEY] = torch.frombuffer(bytearray(json.dumps(meta).encode()), dtype=torch.uint8)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for name, t in items.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TORCH:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _TORCH[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(t.numpy().astype(_DTYPES[code], copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"truncated file while reading {what}: expected {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} available")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict | None]:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionError(f"format version {version}, expected {VERSION}")
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n,) = r.unpack("<I", "name length")
        name = r.take(n, "tensor name").decode()
        code, rank = r.unpack("<BB", f"header of {name}")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size, f"payload of {name}"), dtype=dt).reshape(dims)
        out[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    meta = None
    if META_KEY in out:
        meta = json.loads(bytes(out.pop(META_KEY).numpy()).decode())
    return out, meta


def save_checkpoint(model: torch.nn.Module, path: str | Path, meta: dict | None = None) -> None:
    write_tensors(path, model.state_dict(), meta)


def load_checkpoint(model: torch.nn.Module, path: str | Path, strict: bool = True) -> dict | None:
    """Load into ``model`` after validating every name and shape; returns the metadata."""
    tensors, meta = read_tensors(path)
    expected = model.state_dict()
    for name, t in expected.items():
        if name not in tensors:
            if strict:
                raise ShapeMismatchError(f"tensor {name} missing from checkpoint")
            continue
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise ShapeMismatchError(
                f"shape mismatch for {name}: checkpoint {tuple(tensors[name].shape)} vs model {tuple(t.shape)}")
    if strict:
        extra = sorted(set(tensors) - set(expected))
        if extra:
            raise ShapeMismatchError(f"unexpected tensor {extra[0]} in checkpoint")
    with torch.no_grad():
        for name, t in expected.items():
            if name in tensors:
                t.copy_(tensors[name].to(t.dtype))
    return meta
