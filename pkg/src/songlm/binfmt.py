"""Versioned little-endian binary containers.

Every file starts with a 4-byte magic and a u16 version. Readers fail loudly
on a foreign magic or a newer version.

Parameter checkpoints share one layout::

    magic(4) version(u16) header_len(u32) header(JSON, utf-8) blob(f32 LE)

The JSON header holds the architecture descriptor and, under ``"tensors"``,
an ordered list of ``[name, shape]`` pairs addressing the blob.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import BadCheckpoint

VERSION = 1


def write_header(fh: BinaryIO, magic: bytes, version: int = VERSION) -> None:
    assert len(magic) == 4
    fh.write(magic)
    fh.write(struct.pack("<H", version))


def read_header(fh: BinaryIO, magic: bytes, max_version: int = VERSION) -> int:
    got = fh.read(4)
    if got != magic:
        raise BadCheckpoint(f"expected magic {magic!r}, found {got!r}")
    raw = fh.read(2)
    if len(raw) != 2:
        raise BadCheckpoint("truncated header")
    (version,) = struct.unpack("<H", raw)
    if version > max_version:
        raise BadCheckpoint(f"{magic.decode()} version {version} is newer than supported {max_version}")
    return version


def read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise BadCheckpoint(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def unpack(fh: BinaryIO, fmt: str):
    return struct.unpack(fmt, read_exact(fh, struct.calcsize(fmt)))


def save_params(path, magic: bytes, descriptor: dict, tensors: dict[str, np.ndarray]) -> None:
    header = dict(descriptor)
    header["tensors"] = [[name, list(np.shape(arr))] for name, arr in tensors.items()]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        write_header(fh, magic)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        read_header(fh, magic)
        (n,) = unpack(fh, "<I")
        try:
            header = json.loads(read_exact(fh, n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadCheckpoint(f"corrupt checkpoint header: {exc}") from exc
        tensors: dict[str, np.ndarray] = {}
        for name, shape in header.pop("tensors"):
            count = int(np.prod(shape)) if shape else 1
            data = read_exact(fh, 4 * count)
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise BadCheckpoint("trailing bytes after parameter blob")
    return header, tensors


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def to_bytes(writer, obj) -> bytes:
    buf = io.BytesIO()
    writer(obj, buf)
    return buf.getvalue()


def open_maybe(target, mode: str):
    """Accept either a path or an open binary handle."""
    if isinstance(target, (str, Path)):
        return open(target, mode), True
    return target, False
