"""Binary checkpoint format.

Layout: magic "MSTD", format version u16, then one record per parameter:
name length u16, name UTF-8 bytes, rank u8, one u32 per dimension, then the
little-endian float32 payload. Parameters are written in the model's own
order and round-trip bit-exactly.

A checkpoint may carry "_meta/..." records (1-element arrays) describing
the artifact, e.g. _meta/modality_index, so evaluation can rebuild the
network without the original config.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MSTD"
VERSION = 1


def save_bytes(state: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in state.items():
        # note: asarray, not ascontiguousarray — the latter promotes 0-d to 1-d
        arr = np.asarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        if not encoded:
            raise CheckpointError("refusing to write empty parameter name")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"parameter rank {arr.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("B", arr.ndim))
        for d in arr.shape:
            chunks.append(struct.pack("<I", d))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    return b"".join(chunks)


def load_bytes(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 6:
        raise CheckpointError("truncated checkpoint header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise CheckpointError(
            f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0
        )
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", offset=4)
    state: dict[str, np.ndarray] = {}
    off = 6
    total = len(blob)
    while off < total:
        if off + 2 > total:
            raise CheckpointError("truncated parameter record", offset=off)
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if name_len == 0:
            raise CheckpointError("empty parameter name", offset=off - 2)
        if off + name_len > total:
            raise CheckpointError("truncated parameter name", offset=off)
        name = blob[off : off + name_len].decode("utf-8", errors="replace")
        off += name_len
        if name in state:
            raise CheckpointError(f"duplicate parameter {name!r}", offset=off)
        if off + 1 > total:
            raise CheckpointError(f"truncated rank for {name!r}", offset=off)
        rank = blob[off]
        off += 1
        if off + 4 * rank > total:
            raise CheckpointError(f"truncated dims for {name!r}", offset=off)
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if off + nbytes > total:
            raise CheckpointError(f"truncated payload for {name!r}", offset=off)
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += nbytes
        state[name] = arr.reshape(dims).astype(np.float32)
    return state


def save(path: str | Path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(save_bytes(state))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return load_bytes(Path(path).read_bytes())


def split_meta(state: dict[str, np.ndarray]) -> tuple[dict, dict[str, float]]:
    """Separate weight records from _meta records."""
    weights, meta = {}, {}
    for k, v in state.items():
        if k.startswith("_meta/"):
            meta[k[len("_meta/"):]] = float(np.asarray(v).reshape(-1)[0])
        else:
            weights[k] = v
    return weights, meta


def with_meta(state: dict[str, np.ndarray], **meta: float) -> dict[str, np.ndarray]:
    out = {f"_meta/{k}": np.array([v], dtype=np.float32) for k, v in meta.items()}
    out.update(state)
    return out
