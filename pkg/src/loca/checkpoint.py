"""Binary checkpoint container.

Layout (little-endian): magic "LOCA", format version u32, 32-byte
config hash, u32 tensor count, then length-prefixed named tensors:
u16 name length + utf-8 name, u8 dtype tag, u8 rank, u32 dims, u64
payload length, raw bytes. Round-trips are byte-identical because
tensor order is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"LOCA"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], cfg_hash: bytes) -> None:
    if len(cfg_hash) != 32:
        raise CheckpointError(f"config hash must be 32 bytes, got {len(cfg_hash)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(cfg_hash)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
            payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def load_tensors(
    path: str | Path, expected_hash: bytes | None = None, force: bool = False
) -> tuple[dict[str, np.ndarray], bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint {path}")
        out = raw[off : off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    cfg_hash = take(32)
    if expected_hash is not None and cfg_hash != expected_hash and not force:
        raise CheckpointError(
            f"config hash mismatch for {path}; the checkpoint was written with a "
            "different configuration (use force to load anyway)"
        )
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name} in {path}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (nbytes,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(take(nbytes), dtype=_TAG_DTYPES[tag].newbyteorder("<"))
        tensors[name] = arr.reshape(dims).astype(_TAG_DTYPES[tag])
    return tensors, cfg_hash
