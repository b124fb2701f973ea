"""Binary checkpoint files.

Layout: magic ``ZSCKPT01``; per tensor ``u32`` name length, UTF-8 name,
``u32`` rank, ``rank`` × ``u64`` dims, little-endian float32 payload; then a
trailing ``u64`` record count.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .nn import Module

MAGIC = b"ZSCKPT01"


class CheckpointError(IOError):
    """Malformed checkpoint or mismatch with the target model."""


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<Q", len(tensors)))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic: not a checkpoint file")
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint")
    (expected,) = struct.unpack("<Q", blob[-8:])
    body, pos, end = blob, len(MAGIC), len(blob) - 8
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise CheckpointError("truncated checkpoint record")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    while pos < end:
        (n_name,) = struct.unpack("<I", take(4))
        try:
            name = take(n_name).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("record name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        if name in out:
            raise CheckpointError(f"duplicate record {name!r}")
        out[name] = payload.astype(np.float64)
    if len(out) != expected:
        raise CheckpointError(f"record count mismatch: trailer says {expected}, found {len(out)}")
    return out


def save_checkpoint(model: Module, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint({n: p.data for n, p in model.named_parameters()}))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def load_checkpoint(model: Module, path: str | Path) -> None:
    """Copy stored values into ``model`` after checking names and shapes agree."""
    load_state(model, read_checkpoint(path))


def load_state(model: Module, state: Mapping[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        if tuple(state[name].shape) != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {state[name].shape}, model {p.shape}")
    for name, p in params.items():
        p.data[...] = state[name]
