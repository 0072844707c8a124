"""Binary checkpoint format for EM runs.

Byte layout (all integers little-endian)::

    b"EMDIFF"                    magic, 6 bytes
    u8      version
    u64     config length L
    L bytes UTF-8 JSON (config snapshot, state scalars, array shapes)
    u32     array count
    repeated:
        u16   name length, name bytes (UTF-8)
        u64   element count n
        n*4   float32 payload
    u64     checksum: blake2b-64 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMDIFF"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode(header: dict, arrays: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    header = dict(header)
    header["_shapes"] = {k: list(np.shape(v)) for k, v in arrays.items()}
    cfg = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<B", version), struct.pack("<Q", len(cfg)), cfg,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode()
        data = np.ascontiguousarray(arr, dtype="<f4")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<Q", data.size), data.tobytes()]
    body = b"".join(parts)
    return body + _digest(body)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 1 + 8 + 8:
        raise CheckpointError("checkpoint truncated")
    if blob[:6] != MAGIC:
        raise CheckpointError("bad magic; not an EMDIFF checkpoint")
    version = blob[6]
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, reader supports {VERSION}")
    body, tail = blob[:-8], blob[-8:]
    if _digest(body) != tail:
        raise ChecksumError("checkpoint checksum mismatch")
    pos = 7
    try:
        (clen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        header = json.loads(body[pos:pos + clen].decode())
        pos += clen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shapes = header.pop("_shapes")
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (n,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            if pos + 4 * n > len(body):
                raise CheckpointError(f"array {name!r} truncated")
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).astype(np.float32)
            arrays[name] = arr.reshape(shapes[name])
            pos += 4 * n
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after arrays")
    return header, arrays


def write(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(header, arrays))
    tmp.replace(path)


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
