"""Binary containers.

``EDT1`` tensor::

    b"EDT1" | u32 rank | rank x u64 dims | float64 payload (little-endian, row-major)

Checkpoint (a bundle of named ``EDT1`` tensors)::

    b"EDCK" | u64 header length | UTF-8 JSON header | concatenated EDT1 blobs

The header is ``{"tensors": {name: {"offset": int, "shape": [...]}}, "meta": {...}}``
with offsets counted from the first byte after the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from edpa.errors import FormatError

MAGIC = b"EDT1"
CKPT_MAGIC = b"EDCK"


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0, where: str = "tensor") -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"{where}: bad magic at byte {offset}")
    if len(buf) < offset + 8:
        raise FormatError(f"{where}: truncated rank field at byte {offset + 4}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims_at = offset + 8
    if len(buf) < dims_at + 8 * rank:
        raise FormatError(f"{where}: truncated dims at byte {dims_at}")
    dims = struct.unpack_from(f"<{rank}Q", buf, dims_at)
    payload_at = dims_at + 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = payload_at + 8 * count
    if len(buf) < end:
        raise FormatError(
            f"{where}: truncated payload at byte {payload_at}: "
            f"need {8 * count} bytes, have {len(buf) - payload_at}"
        )
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=payload_at).astype(np.float64)
    return arr.reshape(dims), end


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    arr, end = decode_tensor(buf, 0, where=str(path))
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after offset {end}")
    return arr


def encode_checkpoint(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    blobs = []
    index = {}
    offset = 0
    for name in sorted(tensors):
        blob = encode_tensor(tensors[name])
        index[name] = {"offset": offset, "shape": list(np.shape(tensors[name]))}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": index, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode_checkpoint(buf: bytes, where: str = "checkpoint") -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{where}: bad checkpoint magic")
    if len(buf) < 12:
        raise FormatError(f"{where}: truncated header length at byte 4")
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{where}: malformed header: {exc}") from None
    base = 12 + hlen
    tensors = {}
    for name, entry in header.get("tensors", {}).items():
        arr, _ = decode_tensor(buf, base + entry["offset"], where=f"{where}[{name}]")
        if list(arr.shape) != list(entry["shape"]):
            raise FormatError(f"{where}[{name}]: shape {arr.shape} disagrees with index {entry['shape']}")
        tensors[name] = arr
    return tensors, header.get("meta", {})


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such checkpoint")
    return decode_checkpoint(path.read_bytes(), where=str(path))
