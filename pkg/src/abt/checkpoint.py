"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ABTCKPT1" | u32 header_len | JSON header | tensor blobs | u32 CRC32

The CRC covers every byte before it. The header holds ``format_version``,
free-form metadata and a tensor directory of ``{name, dtype, shape, offset,
nbytes}`` with offsets relative to the start of the blob section. Header JSON
is written with sorted keys, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"ABTCKPT1"
FORMAT_VERSION = 1


class CorruptCheckpointError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    directory, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        directory.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "tensors": directory},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("corrupt checkpoint: bad magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("corrupt checkpoint: CRC mismatch")
    (hlen,) = struct.unpack("<I", body[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(body[start: start + hlen])
    except ValueError:
        raise CorruptCheckpointError("corrupt checkpoint: unreadable header") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    blob_start = start + hlen
    tensors = {}
    for t in header["tensors"]:
        lo = blob_start + t["offset"]
        raw = body[lo: lo + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CorruptCheckpointError("corrupt checkpoint: truncated tensor data")
        tensors[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return header["meta"], tensors


def save(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> str:
    """Write atomically; returns the SHA-256 of the file contents."""
    data = encode(meta, tensors)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
